#include "mscnn/cli.hpp"

int main(int argc, char** argv) { return mscnn::run_cli(argc, argv); }
