#include <cstdio>
int main() { std::puts("usage: kamtorus <subcommand>"); return 2; }
