#include "hps/cli.hpp"

int main(int argc, char** argv) { return hps::dispatch(argc, argv); }
