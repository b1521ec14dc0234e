#include <iostream>
#include <string>
#include <vector>

#include "bilbo_cli/app.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return bilbo::cli::run(args, std::cout, std::cerr);
}
