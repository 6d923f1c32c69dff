#ifndef EMVQ_TESTS_SUPPORT_DOCTEST_TORCH_HPP
#define EMVQ_TESTS_SUPPORT_DOCTEST_TORCH_HPP

// Include last: libtorch's glog-style assertion macros collide with the
// test macros, and one torch header even undefines CHECK outright.
#undef CHECK
#undef CHECK_EQ
#undef CHECK_NE
#undef CHECK_LE
#undef CHECK_LT
#undef CHECK_GE
#undef CHECK_GT
#undef FAIL

#include <doctest.h>

#endif
