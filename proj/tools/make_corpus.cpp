// Writes the deterministic synthetic corpus to a file, one document per line.
#include <fstream>
#include <iostream>

#include "CLI11.hpp"

#include "gau/text.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate the synthetic training corpus"};
  std::string out;
  size_t bytes = 1 << 20;
  uint64_t seed = 1;
  app.add_option("--out", out, "Output file")->required();
  app.add_option("--bytes", bytes, "Approximate size in bytes");
  app.add_option("--seed", seed, "Generator seed");
  CLI11_PARSE(app, argc, argv);
  std::ofstream f(out, std::ios::binary | std::ios::trunc);
  if (!f) {
    std::cerr << "error: cannot write " << out << "\n";
    return 2;
  }
  f << gau::generate_corpus(seed, bytes);
  if (!f) {
    std::cerr << "error: failed writing " << out << "\n";
    return 2;
  }
  return 0;
}
