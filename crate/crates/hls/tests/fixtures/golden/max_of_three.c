#include <stdint.h>

int32_t max_of_three(int32_t a, int32_t b, int32_t c) {
    int32_t m = a;
    if (b > m) {
        m = b;
    }
    if (c > m) {
        m = c;
    }
    return m;
}
