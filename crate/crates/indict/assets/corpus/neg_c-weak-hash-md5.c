#include <openssl/sha.h>

void digest(void) {
    SHA256_CTX ctx;
    SHA256_Init(&ctx);
}
