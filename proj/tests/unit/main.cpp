#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "cimp/allocator.hpp"

int main(int argc, char** argv) {
  cimp::retain_heap_memory();
  return doctest::Context(argc, argv).run();
}
