#include <malloc.h>

#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) {
  // Activations are a few MB each and are freed every step; keeping them on
  // the heap instead of fresh mmap pages avoids refaulting them each time.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return rrca::cli::run({argv + 1, argv + argc}, std::cout, std::cerr);
}
