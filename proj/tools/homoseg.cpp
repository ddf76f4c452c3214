#include "homoseg/cli.hpp"

int main(int argc, char** argv) { return homoseg::cli::run(argc, argv); }
