#include "dii/cli.hpp"

int main(int argc, char** argv) { return dii::cli::main(argc, argv); }
