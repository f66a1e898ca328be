#include <string>
#include <vector>

#include "difftx/cli.hpp"

int main(int argc, char** argv) {
  return difftx::cli::run_command(std::vector<std::string>(argv + 1, argv + argc));
}
