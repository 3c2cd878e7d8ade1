#include <cstdio>

int main() {
    std::fputs("tilegrad: command line not wired up yet\n", stderr);
    return 2;
}
