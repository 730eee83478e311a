#include "nodule_align/cli.hpp"

int main(int argc, char** argv) { return nodule_align::run_cli(argc, argv); }
