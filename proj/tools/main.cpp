#include "hiercon/pipeline.hpp"

int main(int argc, char** argv) { return hiercon::cli_main(argc, argv); }
