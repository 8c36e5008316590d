#pragma once

#include <array>
#include <compare>
#include <cstring>
#include <optional>
#include <string_view>
#include <vector>

#include "pmindex/lock_table.hpp"
#include "pmindex/pm_alloc.hpp"
#include "pmindex/pm_pool.hpp"

namespace pmindex {

inline constexpr std::size_t kIntKeyLen = 8;
inline constexpr std::size_t kStrKeyLen = 24;
inline constexpr std::size_t kMaxKeyLen = 24;

enum class KeyType : std::uint8_t { RandInt, Str };

// Fixed-size key in binary-comparable form: integers are stored big-endian so
// bytewise order equals numeric order; strings are zero-padded to 24 bytes and
// compare bytewise. Key 0 / the all-zero string is reserved (CLHT empty-slot
// sentinel).
class Key {
 public:
  Key() = default;

  static Key from_u64(std::uint64_t v) {
    Key k;
    k.len_ = kIntKeyLen;
    for (int i = 0; i < 8; i++) k.bytes_[i] = static_cast<std::uint8_t>(v >> (56 - 8 * i));
    return k;
  }
  static Key from_string(std::string_view s) {
    Key k;
    k.len_ = kStrKeyLen;
    std::size_t n = std::min(s.size(), kStrKeyLen);
    std::memcpy(k.bytes_.data(), s.data(), n);
    return k;
  }
  static Key from_bytes(const std::uint8_t* data, std::size_t len) {
    Key k;
    k.len_ = static_cast<std::uint8_t>(len);
    std::memcpy(k.bytes_.data(), data, len);
    return k;
  }

  std::uint64_t as_u64() const {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; i++) v = (v << 8) | bytes_[i];
    return v;
  }
  std::size_t size() const { return len_; }
  const std::uint8_t* data() const { return bytes_.data(); }
  std::uint8_t byte(std::size_t i) const { return bytes_[i]; }
  bool is_reserved() const {
    for (std::size_t i = 0; i < len_; i++)
      if (bytes_[i] != 0) return false;
    return true;
  }

  friend std::strong_ordering operator<=>(const Key& a, const Key& b) {
    int c = std::memcmp(a.bytes_.data(), b.bytes_.data(), std::min(a.len_, b.len_));
    if (c != 0) return c < 0 ? std::strong_ordering::less : std::strong_ordering::greater;
    return a.len_ <=> b.len_;
  }
  friend bool operator==(const Key& a, const Key& b) {
    return a.len_ == b.len_ && std::memcmp(a.bytes_.data(), b.bytes_.data(), a.len_) == 0;
  }

 private:
  std::uint8_t len_ = 0;
  std::array<std::uint8_t, kMaxKeyLen> bytes_{};
};

using Value = std::uint64_t;

enum class Ack : std::uint8_t {
  Ok,
  Exists,      // insert of a key the index refuses to update in place (P-CLHT)
  PoolFull,
  Unsupported,
  BadArgument,
  Corrupt,
};

inline const char* ack_name(Ack a) {
  switch (a) {
    case Ack::Ok: return "ok";
    case Ack::Exists: return "exists";
    case Ack::PoolFull: return "pool-full";
    case Ack::Unsupported: return "unsupported";
    case Ack::BadArgument: return "bad-argument";
    case Ack::Corrupt: return "corrupt";
  }
  return "?";
}

// The three seeded defects of the harness sensitivity criterion. All default
// to off; mutation campaigns switch exactly one on.
struct FaultInjection {
  bool clht_skip_insert_persist = false;
  bool bwtree_skip_helper_load_flush = false;
  bool art_disable_fix = false;
};

// Common index contract. insert acknowledges only after every dirtied
// persistent line of the operation is flushed and fenced; lookups are
// non-blocking on all three indexes.
class IndexOps {
 public:
  virtual ~IndexOps() = default;

  virtual Ack insert(const Key& key, Value value) = 0;
  virtual std::optional<Value> lookup(const Key& key) const = 0;
  virtual Ack erase(const Key& key) = 0;

  virtual bool ordered() const { return false; }
  virtual bool upsert() const { return true; }  // insert overwrites existing keys
  // Inclusive range over ordered indexes, results sorted by key.
  virtual void range_query(const Key&, const Key&, std::vector<std::pair<Key, Value>>&) const {
    throw PoolFault("range_query unsupported on this index");
  }
  // First `count` pairs with key >= start, in key order.
  virtual void scan(const Key&, std::size_t, std::vector<std::pair<Key, Value>>&) const {
    throw PoolFault("scan unsupported on this index");
  }

  // Durability-check exclusion: words that are semantically volatile (e.g.
  // CLHT in-bucket lock words).
  virtual bool is_volatile_word(PmAddr) const { return false; }
  // Walker for pm_alloc reachability reports plus the root object addresses.
  virtual std::vector<PmAddr> reachability_roots() const = 0;
  virtual ChildWalker reachability_walker() const = 0;
  // Structural self-check, quiesced-only. Returns problems found.
  virtual std::vector<std::string> validate() const { return {}; }
};

// flush_line over every covered line, then one fence. The conversion action
// applied after stores throughout the converted indexes.
inline void persist(PmemPool& pool, PmAddr addr, std::uint64_t len) {
  const PmAddr first = addr / kCacheLineSize * kCacheLineSize;
  for (PmAddr line = first; line < addr + len; line += kCacheLineSize) pool.flush_line(line);
  pool.fence();
}

inline void persist_no_fence(PmemPool& pool, PmAddr addr, std::uint64_t len) {
  const PmAddr first = addr / kCacheLineSize * kCacheLineSize;
  for (PmAddr line = first; line < addr + len; line += kCacheLineSize) pool.flush_line(line);
}

}  // namespace pmindex
