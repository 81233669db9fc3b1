#include "mer/cli.hpp"

int main(int argc, char** argv) { return mer::dispatch(argc, argv); }
