#include "clipflow/cli.hpp"

int main(int argc, char** argv) { return clipflow::cli::run(argc, argv); }
