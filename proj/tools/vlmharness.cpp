#include <iostream>
#include <string>
#include <vector>

#include "vlmh/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return vlmh::dispatch(args, std::cout, std::cerr);
}
