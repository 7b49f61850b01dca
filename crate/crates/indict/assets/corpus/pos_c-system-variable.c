#include <stdlib.h>

void run_command(const char *cmd) {
    system(cmd);
}
