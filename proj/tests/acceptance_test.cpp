#include <gtest/gtest.h>
TEST(Pending, Pending) {}
