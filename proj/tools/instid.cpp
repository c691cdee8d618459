#include <cstdio>

int main() {
    std::puts("instid: subcommands not wired up yet");
    return 2;
}
