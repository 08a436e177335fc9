#include "promptvid/cli.hpp"

int main(int argc, char** argv) {
    return promptvid::cli_main({argv + 1, argv + argc});
}
