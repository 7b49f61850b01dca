#include <stdlib.h>

void list_dir(void) {
    system("ls -la");
}
