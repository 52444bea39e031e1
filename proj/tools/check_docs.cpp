// Exits nonzero when docs/equation_map.json names a symbol that no longer
// exists or disagrees with docs/coverage.txt.
#include <iostream>

#include "tgk/docs.hpp"

int main(int argc, char** argv) {
  const std::filesystem::path root = argc > 1 ? argv[1] : ".";
  try {
    const auto r = tgk::check_source_tree(root);
    if (!r.ok()) {
      std::cerr << r.str();
      return 1;
    }
    std::cout << "equation map: all entries resolve\n";
  } catch (const std::exception& e) {
    std::cerr << "check_docs: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
