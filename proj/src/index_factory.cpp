#include "pmindex/crash_harness.hpp"

namespace pmindex {

const char* index_kind_name(IndexKind kind) {
  switch (kind) {
    case IndexKind::Clht: return "clht";
    case IndexKind::Art: return "art";
    case IndexKind::BwTree: return "bwtree";
  }
  return "?";
}

std::optional<IndexKind> parse_index_kind(std::string_view name) {
  if (name == "clht") return IndexKind::Clht;
  if (name == "art") return IndexKind::Art;
  if (name == "bwtree") return IndexKind::BwTree;
  return std::nullopt;
}

std::unique_ptr<IndexOps> open_index(IndexKind kind, PmemPool& pool, PmAllocator& alloc,
                                     LockTable& locks, KeyType key_type, FaultInjection faults) {
  const std::size_t key_len = key_type == KeyType::RandInt ? kIntKeyLen : kStrKeyLen;
  switch (kind) {
    case IndexKind::Clht:
      if (key_type != KeyType::RandInt)
        throw std::runtime_error("p-clht stores 8-byte keys in bucket slots; string keys are unsupported");
      return PClht::open(pool, alloc, locks, PClht::Options{}, faults);
    case IndexKind::Art:
      return PArt::open(pool, alloc, locks, key_len, faults);
    case IndexKind::BwTree:
      return PBwTree::open(pool, alloc, locks, key_len, PBwTree::Options{}, faults);
  }
  throw std::runtime_error("unknown index kind");
}

IndexRuntime IndexRuntime::create(IndexKind kind, KeyType key_type, std::uint64_t pool_bytes,
                                  FaultInjection faults) {
  IndexRuntime rt;
  rt.kind = kind;
  rt.key_type = key_type;
  rt.faults = faults;
  rt.pool = std::make_unique<PmemPool>(pool_bytes);
  rt.alloc = std::make_unique<PmAllocator>(*rt.pool);
  rt.locks = std::make_unique<LockTable>();
  rt.index = open_index(kind, *rt.pool, *rt.alloc, *rt.locks, key_type, faults);
  return rt;
}

void IndexRuntime::reopen() {
  index.reset();
  index = open_index(kind, *pool, *alloc, *locks, key_type, faults);
}

}  // namespace pmindex
