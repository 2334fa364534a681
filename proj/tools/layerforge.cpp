#include "layerforge/cli.hpp"

int main(int argc, char** argv) { return layerforge::run_cli(argc, argv); }
