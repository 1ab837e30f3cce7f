#include "patseg/cli.hpp"

int main(int argc, char** argv) { return patseg::run_cli(argc, argv); }
