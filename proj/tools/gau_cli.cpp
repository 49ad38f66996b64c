#include "commands.hpp"

#include "gau/tensor.hpp"

int main(int argc, char** argv) {
  gau::configure_allocator();
  return gau::cli::run_cli(argc, argv);
}
