#include <cstdio>

int main() {
    std::puts("lcanet: not wired up yet");
    return 0;
}
