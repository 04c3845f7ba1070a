#include <string>
#include <vector>

#include "cli.hpp"
#include "instcal/alloc.hpp"

int main(int argc, char** argv) {
  instcal::tune_allocator();
  return instcal::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
