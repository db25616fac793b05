#include <gtest/gtest.h>

#include "didr/allocator.hpp"

int main(int argc, char** argv) {
  didr::tune_allocator();
  testing::InitGoogleTest(&argc, argv);
  return RUN_ALL_TESTS();
}
