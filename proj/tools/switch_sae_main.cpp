#include "switch_sae/cli.hpp"

int main(int argc, char** argv) { return ssae::run(argc, argv); }
