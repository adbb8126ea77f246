#include "seqforge/cli.h"

int main(int argc, char** argv) {
  return seqforge::cli::main(argc, argv);
}
