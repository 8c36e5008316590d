#pragma once

#include <memory>

#include "pmindex/crash_harness.hpp"

namespace pmindex::testing {

// Arms a hook that crashes at the Nth store inside ops carrying `tag`.
inline void crash_at(PmemPool& pool, OpTag tag, std::uint64_t ordinal) {
  pool.set_crash_hook([&pool, tag, ordinal](const PmEvent&) {
    if (pool.current_op_tag() == tag && pool.store_ordinal_in_op() == ordinal)
      return HookVerdict::Crash;
    return HookVerdict::Continue;
  });
}

inline void abort_at(PmemPool& pool, OpTag tag, std::uint64_t ordinal) {
  pool.set_crash_hook([&pool, tag, ordinal](const PmEvent&) {
    if (pool.current_op_tag() == tag && pool.store_ordinal_in_op() == ordinal)
      return HookVerdict::AbortOp;
    return HookVerdict::Continue;
  });
}

template <typename Fn>
inline bool expect_crash(Fn&& fn) {
  try {
    fn();
  } catch (const CrashUnwind&) {
    return true;
  }
  return false;
}

}  // namespace pmindex::testing
