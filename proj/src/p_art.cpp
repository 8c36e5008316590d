#include "pmindex/p_art.hpp"

#include <algorithm>
#include <cassert>

namespace pmindex {

namespace {

constexpr std::uint64_t magic_u64(const char (&s)[9]) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; i--) v = (v << 8) | static_cast<std::uint8_t>(s[i]);
  return v;
}

constexpr std::uint64_t kMagic = magic_u64("PART0001");
constexpr PmAddr kMagicAddr = 0;
constexpr PmAddr kRootCell = 8;
constexpr PmAddr kKeyLenCell = 16;

enum Kind : std::uint8_t { kN4 = 1, kN16 = 2, kN48 = 3, kN256 = 4, kLeaf = 5 };

constexpr unsigned capacity_of(std::uint8_t kind) {
  switch (kind) {
    case kN4: return 4;
    case kN16: return 16;
    case kN48: return 48;
    default: return 256;
  }
}

constexpr std::uint64_t node_bytes(std::uint8_t kind) {
  switch (kind) {
    case kN4: return 64;     // meta, prefix, 4 key bytes, 4 children
    case kN16: return 192;   // + 16 key bytes, 16 children
    case kN48: return 704;   // + 256 index bytes, 48 children
    default: return 2112;    // 256 children
  }
}

// Header word: kind | count<<8 | prefix_len<<24 | level<<40.
constexpr std::uint64_t pack_meta(std::uint8_t kind, std::uint16_t count, std::uint16_t plen,
                                  std::uint16_t level) {
  return static_cast<std::uint64_t>(kind) | (static_cast<std::uint64_t>(count) << 8) |
         (static_cast<std::uint64_t>(plen) << 24) | (static_cast<std::uint64_t>(level) << 40);
}

constexpr PmAddr kOffMeta = 0;
constexpr PmAddr kOffPrefix = 8;
constexpr PmAddr kOffN4Keys = 16;
constexpr PmAddr kOffN4Children = 24;
constexpr PmAddr kOffN16Keys = 16;
constexpr PmAddr kOffN16Children = 32;
constexpr PmAddr kOffN48Index = 16;
constexpr PmAddr kOffN48Children = 272;
constexpr PmAddr kOffN256Children = 16;
constexpr PmAddr kOffLeafKey = 8;
constexpr PmAddr kOffLeafValue = 32;
constexpr std::uint64_t kLeafBytes = 40;

constexpr const char* kTagNode = "art/node";
constexpr const char* kTagLeaf = "art/leaf";

std::uint8_t load_byte(const PmemPool& pool, PmAddr addr) {
  const std::uint64_t w = pool.load8(addr & ~7ull);
  return static_cast<std::uint8_t>(w >> (8 * (addr % 8)));
}

void store_byte(PmemPool& pool, PmAddr addr, std::uint8_t v) {
  const PmAddr word = addr & ~7ull;
  const unsigned shift = 8 * (addr % 8);
  std::uint64_t w = pool.load8(word);
  w = (w & ~(0xffull << shift)) | (static_cast<std::uint64_t>(v) << shift);
  pool.store8(word, w);
}

}  // namespace

struct PArt::Meta {
  std::uint64_t raw = 0;
  std::uint8_t kind = 0;
  std::uint16_t count = 0;
  std::uint16_t prefix_len = 0;
  std::uint16_t level = 0;
};

PArt::Meta PArt::meta_of(PmAddr node) const {
  Meta m;
  m.raw = pool_.load8(node + kOffMeta);
  m.kind = static_cast<std::uint8_t>(m.raw);
  m.count = static_cast<std::uint16_t>(m.raw >> 8);
  m.prefix_len = static_cast<std::uint16_t>(m.raw >> 24);
  m.level = static_cast<std::uint16_t>(m.raw >> 40);
  return m;
}

bool PArt::is_leaf(PmAddr node) const {
  return static_cast<std::uint8_t>(pool_.load8(node + kOffMeta)) == kLeaf;
}

std::unique_ptr<PArt> PArt::open(PmemPool& pool, PmAllocator& alloc, LockTable& locks,
                                 std::size_t key_len, FaultInjection faults) {
  locks.reset_all();
  auto art = std::unique_ptr<PArt>(new PArt(pool, alloc, locks, key_len, faults));
  const std::uint64_t magic = pool.load8(kMagicAddr);
  if (magic == 0) {
    PmemPool::OpScope scope(pool, OpTag::Init);
    // The root is a fixed N256 at level 0; it never grows, splits, or moves.
    PmAddr root = alloc.alloc(node_bytes(kN256), kCacheLineSize, kTagNode);
    if (root == kNullAddr) throw std::runtime_error("art: pool too small");
    pool.store8(root + kOffMeta, pack_meta(kN256, 0, 0, 0));
    persist(pool, root, node_bytes(kN256));
    pool.store8(kRootCell, root);
    pool.store8(kKeyLenCell, key_len);
    pool.store8(kMagicAddr, kMagic);
    persist(pool, kMagicAddr, kCacheLineSize);
    scope.complete();
  } else if (magic != kMagic) {
    throw std::runtime_error("art: unrecognized root magic");
  } else if (pool.load8(kKeyLenCell) != key_len) {
    throw std::runtime_error("art: key length mismatch");
  }
  return art;
}

PmAddr PArt::make_leaf(const Key& key, Value value) {
  PmAddr leaf = alloc_.alloc(64, kCacheLineSize, kTagLeaf);
  if (leaf == kNullAddr) return kNullAddr;
  pool_.store8(leaf + kOffMeta, pack_meta(kLeaf, 0, 0, 0) | (static_cast<std::uint64_t>(key.size()) << 8));
  std::array<std::uint8_t, kMaxKeyLen> buf{};
  std::memcpy(buf.data(), key.data(), key.size());
  pool_.store_bytes(leaf + kOffLeafKey, buf);
  pool_.store8(leaf + kOffLeafValue, value);
  persist(pool_, leaf, kLeafBytes);
  return leaf;
}

Key PArt::leaf_key(PmAddr leaf) const {
  std::array<std::uint8_t, kMaxKeyLen> buf;
  pool_.load_bytes(leaf + kOffLeafKey, buf);
  return Key::from_bytes(buf.data(), key_len_);
}

Value PArt::leaf_value(PmAddr leaf) const { return pool_.load8(leaf + kOffLeafValue); }

PmAddr PArt::child_slot(PmAddr node, const Meta& m, std::uint8_t byte) const {
  switch (m.kind) {
    case kN4:
      for (unsigned i = 0; i < std::min<unsigned>(m.count, 4); i++) {
        if (load_byte(pool_, node + kOffN4Keys + i) == byte &&
            pool_.load8(node + kOffN4Children + i * 8) != kNullAddr)
          return node + kOffN4Children + i * 8;
      }
      return kNullAddr;
    case kN16:
      for (unsigned i = 0; i < std::min<unsigned>(m.count, 16); i++) {
        if (load_byte(pool_, node + kOffN16Keys + i) == byte &&
            pool_.load8(node + kOffN16Children + i * 8) != kNullAddr)
          return node + kOffN16Children + i * 8;
      }
      return kNullAddr;
    case kN48: {
      const std::uint8_t slot = load_byte(pool_, node + kOffN48Index + byte);
      if (slot == 0 || slot > 48) return kNullAddr;
      PmAddr s = node + kOffN48Children + (slot - 1) * 8;
      return pool_.load8(s) != kNullAddr ? s : kNullAddr;
    }
    default:
      return node + kOffN256Children + static_cast<std::uint64_t>(byte) * 8;
  }
}

unsigned PArt::live_children(PmAddr node, const Meta& m) const {
  unsigned live = 0;
  switch (m.kind) {
    case kN4:
      for (unsigned i = 0; i < std::min<unsigned>(m.count, 4); i++)
        live += pool_.load8(node + kOffN4Children + i * 8) != kNullAddr;
      break;
    case kN16:
      for (unsigned i = 0; i < std::min<unsigned>(m.count, 16); i++)
        live += pool_.load8(node + kOffN16Children + i * 8) != kNullAddr;
      break;
    case kN48:
      for (unsigned i = 0; i < 48; i++)
        live += pool_.load8(node + kOffN48Children + i * 8) != kNullAddr;
      break;
    default:
      for (unsigned i = 0; i < 256; i++)
        live += pool_.load8(node + kOffN256Children + i * 8) != kNullAddr;
      break;
  }
  return live;
}

bool PArt::node_full(PmAddr node, const Meta& m) const {
  (void)node;
  return m.count >= capacity_of(m.kind);
}

void PArt::collect_children(PmAddr node, const Meta& m,
                            std::vector<std::pair<std::uint8_t, PmAddr>>& out) const {
  switch (m.kind) {
    case kN4:
    case kN16: {
      const PmAddr keys = m.kind == kN4 ? kOffN4Keys : kOffN16Keys;
      const PmAddr children = m.kind == kN4 ? kOffN4Children : kOffN16Children;
      const unsigned cap = capacity_of(m.kind);
      for (unsigned i = 0; i < std::min<unsigned>(m.count, cap); i++) {
        PmAddr c = pool_.load8(node + children + i * 8);
        if (c != kNullAddr) out.emplace_back(load_byte(pool_, node + keys + i), c);
      }
      std::sort(out.begin(), out.end());
      break;
    }
    case kN48:
      for (unsigned b = 0; b < 256; b++) {
        const std::uint8_t slot = load_byte(pool_, node + kOffN48Index + b);
        if (slot == 0 || slot > 48) continue;
        PmAddr c = pool_.load8(node + kOffN48Children + (slot - 1) * 8);
        if (c != kNullAddr) out.emplace_back(static_cast<std::uint8_t>(b), c);
      }
      break;
    default:
      for (unsigned b = 0; b < 256; b++) {
        PmAddr c = pool_.load8(node + kOffN256Children + b * 8);
        if (c != kNullAddr) out.emplace_back(static_cast<std::uint8_t>(b), c);
      }
      break;
  }
}

PmAddr PArt::leftmost_leaf(PmAddr node) const {
  for (unsigned guard = 0; guard < 64; guard++) {
    if (is_leaf(node)) return node;
    Meta m = meta_of(node);
    std::vector<std::pair<std::uint8_t, PmAddr>> kids;
    collect_children(node, m, kids);
    if (kids.empty()) return kNullAddr;
    node = kids.front().second;
  }
  return kNullAddr;
}

std::uint8_t PArt::prefix_byte(PmAddr node, const Meta& m, std::uint32_t depth,
                               std::uint32_t i) const {
  if (i < 8) return load_byte(pool_, node + kOffPrefix + i);
  // Pessimistic reconstruction: stored prefix holds at most 8 bytes; fetch
  // the byte from any key in the subtree.
  PmAddr leaf = leftmost_leaf(node);
  if (leaf == kNullAddr) throw PoolFault("art: prefix reconstruction on empty subtree");
  (void)m;
  return load_byte(pool_, leaf + kOffLeafKey + depth + i);
}

bool PArt::dead(PmAddr node) const {
  std::lock_guard g(dead_mu_);
  return dead_.count(node) != 0;
}

void PArt::mark_dead(PmAddr node) {
  std::lock_guard g(dead_mu_);
  dead_.insert(node);
}

void PArt::record_split(std::uint64_t vis) {
  std::lock_guard g(stats_mu_);
  split_stats_.count++;
  split_stats_.min_visibility_stores = std::min(split_stats_.min_visibility_stores, vis);
  split_stats_.max_visibility_stores = std::max(split_stats_.max_visibility_stores, vis);
}

PArt::SmoStats PArt::path_split_stats() const {
  std::lock_guard g(stats_mu_);
  return split_stats_;
}

// --- lookup -----------------------------------------------------------

std::optional<Value> PArt::lookup(const Key& key) const {
  if (key.size() != key_len_) return std::nullopt;
  PmAddr node = pool_.load8(kRootCell);
  std::uint32_t depth = 0;
  for (unsigned guard = 0;; guard++) {
    if (guard > kMaxKeyLen + 8) throw PoolFault("art: lookup descent cycle");
    Meta m = meta_of(node);
    if (m.level >= key.size()) return std::nullopt;
    if (depth + m.prefix_len == m.level) {
      // Consistent header: the stored prefix fragment is trustworthy.
      const unsigned n = std::min<unsigned>(m.prefix_len, 8);
      for (unsigned i = 0; i < n; i++)
        if (load_byte(pool_, node + kOffPrefix + i) != key.byte(depth + i)) return std::nullopt;
    }
    // Stale header (crash remnant or in-flight writer): ignore the prefix and
    // branch at the node's immutable level; the leaf check decides.
    PmAddr slot = child_slot(node, m, key.byte(m.level));
    if (slot == kNullAddr) return std::nullopt;
    PmAddr child = pool_.load8(slot);
    if (child == kNullAddr) return std::nullopt;
    if (is_leaf(child)) {
      if (leaf_key(child) == key) return leaf_value(child);
      return std::nullopt;
    }
    depth = m.level + 1;
    node = child;
  }
}

// --- insert -----------------------------------------------------------

Ack PArt::insert(const Key& key, Value value) {
  if (key.size() != key_len_) return Ack::BadArgument;
  PmemPool::OpScope scope(pool_, OpTag::ArtInsert);
  for (;;) {
    bool retry = false;
    Ack ack = insert_attempt(key, value, retry);
    if (retry) continue;
    if (ack == Ack::Ok) scope.complete();
    return ack;
  }
}

Ack PArt::insert_attempt(const Key& key, Value value, bool& retry) {
  PmAddr parent = kNullAddr;
  PmAddr parent_slot = kRootCell;
  PmAddr node = pool_.load8(kRootCell);
  std::uint32_t depth = 0;
  for (unsigned guard = 0;; guard++) {
    if (guard > kMaxKeyLen + 8) throw PoolFault("art: insert descent cycle");
    Meta m = meta_of(node);
    if (depth + m.prefix_len != m.level) {
      // Writers must not operate on a mismatched header: either fix the crash
      // remnant now or, if a concurrent writer owns the node, tolerate it the
      // way a reader would.
      FixResult r = detect_and_fix(node, depth);
      if (r == FixResult::Fixed || r == FixResult::AlreadyConsistent) {
        m = meta_of(node);
        if (depth + m.prefix_len != m.level) {
          retry = true;  // node changed while fixing
          return Ack::Ok;
        }
      } else if (r == FixResult::Corrupt) {
        return Ack::BadArgument;
      }
      // Transient: fall through and branch at the level like a reader.
    }
    if (depth + m.prefix_len == m.level && m.prefix_len > 0) {
      const std::uint32_t cmp = std::min<std::uint32_t>(m.prefix_len, key.size() - depth);
      for (std::uint32_t i = 0; i < cmp; i++) {
        if (prefix_byte(node, m, depth, i) != key.byte(depth + i))
          return path_split(parent, parent_slot, node, depth, i, key, value, retry);
      }
    }
    if (m.level >= key.size()) return Ack::BadArgument;
    const std::uint8_t b = key.byte(m.level);
    PmAddr slot = child_slot(node, m, b);
    if (slot == kNullAddr || pool_.load8(slot) == kNullAddr)
      return add_entry(parent, parent_slot, node, depth, b, key, value, retry);
    PmAddr child = pool_.load8(slot);
    if (is_leaf(child)) {
      Key existing = leaf_key(child);
      if (existing == key) {
        // Upsert: the value overwrite is a single word store.
        pool_.store8(child + kOffLeafValue, value);
        persist(pool_, child + kOffLeafValue, kWordSize);
        return Ack::Ok;
      }
      return leaf_split(node, slot, child, m.level + 1, key, value, retry);
    }
    parent = node;
    parent_slot = slot;
    depth = m.level + 1;
    node = child;
  }
}

Ack PArt::add_entry(PmAddr parent, PmAddr parent_slot, PmAddr node, std::uint32_t depth,
                    std::uint8_t byte, const Key& key, Value value, bool& retry) {
  (void)depth;
  NodeLockGuard guard(locks_, pool_, node);
  Meta m = meta_of(node);
  if (dead(node)) {
    retry = true;
    return Ack::Ok;
  }
  {
    PmAddr slot = child_slot(node, m, byte);
    if (slot != kNullAddr && pool_.load8(slot) != kNullAddr) {
      retry = true;  // someone beat us to this byte
      return Ack::Ok;
    }
  }
  PmAddr leaf = make_leaf(key, value);
  if (leaf == kNullAddr) return Ack::PoolFull;

  const std::uint16_t bumped =
      static_cast<std::uint16_t>(std::min<unsigned>(m.count + 1, capacity_of(m.kind)));
  if (m.kind == kN256) {
    // N256 always has a slot per byte; the entry store is the commit point.
    pool_.store8(node + kOffN256Children + static_cast<std::uint64_t>(byte) * 8, leaf);
    persist(pool_, node + kOffN256Children + static_cast<std::uint64_t>(byte) * 8, kWordSize);
    pool_.store8(node + kOffMeta, pack_meta(kN256, bumped, m.prefix_len, m.level));
    persist(pool_, node + kOffMeta, kWordSize);
    return Ack::Ok;
  }
  if (!node_full(node, m)) {
    switch (m.kind) {
      case kN4: {
        // Entry bytes first, then the count bump makes it visible.
        store_byte(pool_, node + kOffN4Keys + m.count, byte);
        pool_.store8(node + kOffN4Children + m.count * 8, leaf);
        persist(pool_, node + kOffN4Children + m.count * 8, kWordSize);
        pool_.store8(node + kOffMeta, pack_meta(kN4, bumped, m.prefix_len, m.level));
        persist(pool_, node + kOffMeta, kWordSize);
        return Ack::Ok;
      }
      case kN16: {
        // The key byte shares the header line; the header persist below
        // covers it. A reader racing the unflushed byte lands on the wrong
        // leaf and rejects it by the full-key check.
        store_byte(pool_, node + kOffN16Keys + m.count, byte);
        pool_.store8(node + kOffN16Children + m.count * 8, leaf);
        persist(pool_, node + kOffN16Children + m.count * 8, kWordSize);
        pool_.store8(node + kOffMeta, pack_meta(kN16, bumped, m.prefix_len, m.level));
        persist(pool_, node + kOffMeta, kWordSize);
        return Ack::Ok;
      }
      default: {  // kN48: the index byte is the visibility store
        // A deletion nulls only the child word, so index entries can go
        // stale. If this byte still routes to a dead slot, refill it: the
        // child store itself is then the commit.
        const std::uint8_t routed = load_byte(pool_, node + kOffN48Index + byte);
        if (routed != 0 && routed <= 48 &&
            pool_.load8(node + kOffN48Children + (routed - 1) * 8) == kNullAddr) {
          pool_.store8(node + kOffN48Children + (routed - 1) * 8, leaf);
          persist(pool_, node + kOffN48Children + (routed - 1) * 8, kWordSize);
          pool_.store8(node + kOffMeta, pack_meta(kN48, bumped, m.prefix_len, m.level));
          persist(pool_, node + kOffMeta, kWordSize);
          return Ack::Ok;
        }
        unsigned free_slot = 48;
        for (unsigned i = 0; i < 48; i++) {
          if (pool_.load8(node + kOffN48Children + i * 8) == kNullAddr) {
            free_slot = i;
            break;
          }
        }
        if (free_slot == 48) throw PoolFault("art: N48 below capacity but no free slot");
        // Clear stale index entries of deleted bytes that still reference
        // this slot, or they would alias the new entry.
        bool scrubbed = false;
        for (unsigned b2 = 0; b2 < 256; b2++) {
          if (b2 != byte && load_byte(pool_, node + kOffN48Index + b2) == free_slot + 1) {
            store_byte(pool_, node + kOffN48Index + b2, 0);
            scrubbed = true;
          }
        }
        pool_.store8(node + kOffN48Children + free_slot * 8, leaf);
        if (scrubbed) persist_no_fence(pool_, node + kOffN48Index, 256);
        persist(pool_, node + kOffN48Children + free_slot * 8, kWordSize);
        store_byte(pool_, node + kOffN48Index + byte, static_cast<std::uint8_t>(free_slot + 1));
        persist(pool_, node + kOffN48Index + byte, 1);
        pool_.store8(node + kOffMeta, pack_meta(kN48, bumped, m.prefix_len, m.level));
        persist(pool_, node + kOffMeta, kWordSize);
        return Ack::Ok;
      }
    }
  }

  // Node full (or hole-exhausted): copy to the kind that fits the live set
  // plus the new entry, then swing the parent link.
  std::vector<std::pair<std::uint8_t, PmAddr>> kids;
  collect_children(node, m, kids);
  kids.emplace_back(byte, leaf);
  std::sort(kids.begin(), kids.end());
  std::uint8_t nk = kids.size() <= 4 ? kN4 : kids.size() <= 16 ? kN16 : kids.size() <= 48 ? kN48 : kN256;
  PmAddr fresh = alloc_.alloc(node_bytes(nk), kCacheLineSize, kTagNode);
  if (fresh == kNullAddr) {
    alloc_.defer_free(leaf);
    return Ack::PoolFull;
  }
  pool_.store8(fresh + kOffPrefix, pool_.load8(node + kOffPrefix));
  for (unsigned i = 0; i < kids.size(); i++) {
    switch (nk) {
      case kN4:
        store_byte(pool_, fresh + kOffN4Keys + i, kids[i].first);
        pool_.store8(fresh + kOffN4Children + i * 8, kids[i].second);
        break;
      case kN16:
        store_byte(pool_, fresh + kOffN16Keys + i, kids[i].first);
        pool_.store8(fresh + kOffN16Children + i * 8, kids[i].second);
        break;
      case kN48:
        pool_.store8(fresh + kOffN48Children + i * 8, kids[i].second);
        store_byte(pool_, fresh + kOffN48Index + kids[i].first, static_cast<std::uint8_t>(i + 1));
        break;
      default:
        pool_.store8(fresh + kOffN256Children + static_cast<std::uint64_t>(kids[i].first) * 8,
                     kids[i].second);
        break;
    }
  }
  pool_.store8(fresh + kOffMeta,
               pack_meta(nk, static_cast<std::uint16_t>(kids.size()), m.prefix_len, m.level));
  persist(pool_, fresh, node_bytes(nk));

  if (parent == kNullAddr) throw PoolFault("art: root node cannot grow");
  NodeLockGuard pguard(locks_, pool_, parent);
  if (dead(parent) || pool_.load8(parent_slot) != node) {
    retry = true;
    return Ack::Ok;
  }
  pool_.store8(parent_slot, fresh);  // atomic parent link swap
  persist(pool_, parent_slot, kWordSize);
  mark_dead(node);
  alloc_.defer_free(node);
  return Ack::Ok;
}

Ack PArt::leaf_split(PmAddr node, PmAddr slot, PmAddr leaf, std::uint32_t depth, const Key& key,
                     Value value, bool& retry) {
  // Two distinct keys under one slot: build an N4 branching at their first
  // divergent byte. Copy-on-write, committed by the slot store.
  Key existing = leaf_key(leaf);
  std::uint32_t j = depth;
  while (j < key.size() && existing.byte(j) == key.byte(j)) j++;
  if (j >= key.size()) {
    retry = true;  // raced with an upsert of the same key
    return Ack::Ok;
  }
  NodeLockGuard guard(locks_, pool_, node);
  if (dead(node) || pool_.load8(slot) != leaf) {
    retry = true;
    return Ack::Ok;
  }
  PmAddr nleaf = make_leaf(key, value);
  if (nleaf == kNullAddr) return Ack::PoolFull;
  PmAddr n4 = alloc_.alloc(node_bytes(kN4), kCacheLineSize, kTagNode);
  if (n4 == kNullAddr) {
    alloc_.defer_free(nleaf);
    return Ack::PoolFull;
  }
  const std::uint16_t plen = static_cast<std::uint16_t>(j - depth);
  std::uint64_t pfx = 0;
  for (unsigned i = 0; i < std::min<std::uint32_t>(plen, 8); i++)
    pfx |= static_cast<std::uint64_t>(key.byte(depth + i)) << (8 * i);
  pool_.store8(n4 + kOffPrefix, pfx);
  std::array<std::pair<std::uint8_t, PmAddr>, 2> kids = {
      std::make_pair(existing.byte(j), leaf), std::make_pair(key.byte(j), nleaf)};
  if (kids[0].first > kids[1].first) std::swap(kids[0], kids[1]);
  for (unsigned i = 0; i < 2; i++) {
    store_byte(pool_, n4 + kOffN4Keys + i, kids[i].first);
    pool_.store8(n4 + kOffN4Children + i * 8, kids[i].second);
  }
  pool_.store8(n4 + kOffMeta, pack_meta(kN4, 2, plen, static_cast<std::uint16_t>(j)));
  persist(pool_, n4, node_bytes(kN4));
  pool_.store8(slot, n4);  // single atomic commit
  persist(pool_, slot, kWordSize);
  return Ack::Ok;
}

Ack PArt::path_split(PmAddr parent, PmAddr parent_slot, PmAddr node, std::uint32_t depth,
                     std::uint32_t diverge, const Key& key, Value value, bool& retry) {
  // Two-step SMO. Step 1 installs a new intermediate node above `node`;
  // step 2 rewrites `node`'s header to the residual suffix. A crash between
  // the steps leaves a stale header that readers tolerate and
  // detect_and_fix repairs.
  if (parent == kNullAddr) throw PoolFault("art: root has no prefix to split");
  NodeLockGuard guard(locks_, pool_, node);       // bottom-up lock order
  NodeLockGuard pguard(locks_, pool_, parent);
  if (dead(node) || dead(parent) || pool_.load8(parent_slot) != node) {
    retry = true;
    return Ack::Ok;
  }
  Meta m = meta_of(node);
  if (depth + m.prefix_len != m.level || diverge >= m.prefix_len ||
      prefix_byte(node, m, depth, diverge) == key.byte(depth + diverge)) {
    retry = true;  // header changed since the descent
    return Ack::Ok;
  }

  PmemPool::OpScope scope(pool_, OpTag::ArtPathSplit);
  std::uint64_t vis = 0;

  PmAddr leaf = make_leaf(key, value);
  if (leaf == kNullAddr) return Ack::PoolFull;
  PmAddr mid = alloc_.alloc(node_bytes(kN4), kCacheLineSize, kTagNode);
  if (mid == kNullAddr) {
    alloc_.defer_free(leaf);
    return Ack::PoolFull;
  }

  const std::uint8_t old_byte = prefix_byte(node, m, depth, diverge);
  const std::uint16_t mid_level = static_cast<std::uint16_t>(depth + diverge);
  std::uint64_t pfx = 0;
  for (std::uint32_t i = 0; i < std::min<std::uint32_t>(diverge, 8); i++)
    pfx |= static_cast<std::uint64_t>(prefix_byte(node, m, depth, i)) << (8 * i);
  pool_.store8(mid + kOffPrefix, pfx);
  std::array<std::pair<std::uint8_t, PmAddr>, 2> kids = {
      std::make_pair(old_byte, node), std::make_pair(key.byte(mid_level), leaf)};
  if (kids[0].first > kids[1].first) std::swap(kids[0], kids[1]);
  for (unsigned i = 0; i < 2; i++) {
    store_byte(pool_, mid + kOffN4Keys + i, kids[i].first);
    pool_.store8(mid + kOffN4Children + i * 8, kids[i].second);
  }
  pool_.store8(mid + kOffMeta, pack_meta(kN4, 2, static_cast<std::uint16_t>(diverge), mid_level));
  persist(pool_, mid, node_bytes(kN4));

  // Step 1: the new node becomes reachable.
  pool_.store8(parent_slot, mid);
  vis++;
  persist(pool_, parent_slot, kWordSize);

  // Step 2: residual suffix into the old header. Prefix bytes first, then the
  // single meta-word store commits the new length.
  const std::uint16_t rest = static_cast<std::uint16_t>(m.prefix_len - diverge - 1);
  std::uint64_t rfx = 0;
  for (std::uint32_t i = 0; i < std::min<std::uint16_t>(rest, 8); i++)
    rfx |= static_cast<std::uint64_t>(prefix_byte(node, m, depth, diverge + 1 + i)) << (8 * i);
  pool_.store8(node + kOffPrefix, rfx);
  pool_.store8(node + kOffMeta, pack_meta(m.kind, m.count, rest, m.level));
  vis++;
  persist(pool_, node, 16);

  record_split(vis);
  scope.complete();
  return Ack::Ok;
}

PArt::FixResult PArt::detect_and_fix(PmAddr node, std::uint32_t depth) {
  if (faults_.art_disable_fix) {
    transient_.fetch_add(1, std::memory_order_relaxed);
    return FixResult::Transient;
  }
  if (!locks_.try_lock(node)) {
    // Another writer is active here; the mismatch may be transient. Tolerate.
    transient_.fetch_add(1, std::memory_order_relaxed);
    return FixResult::Transient;
  }
  Meta m = meta_of(node);
  if (dead(node)) {
    locks_.unlock(node);
    return FixResult::Transient;
  }
  if (depth + m.prefix_len == m.level) {
    locks_.unlock(node);
    return FixResult::AlreadyConsistent;
  }
  if (m.level < depth) {
    locks_.unlock(node);
    return FixResult::Corrupt;
  }
  // Lock acquired and the mismatch persists: crash remnant. Recompute the
  // prefix from the immutable level and any full key below this node.
  PmemPool::OpScope scope(pool_, OpTag::ArtFix);
  PmAddr leaf = leftmost_leaf(node);
  if (leaf == kNullAddr) {
    locks_.unlock(node);
    return FixResult::Corrupt;
  }
  const std::uint16_t plen = static_cast<std::uint16_t>(m.level - depth);
  std::uint64_t pfx = 0;
  for (unsigned i = 0; i < std::min<std::uint16_t>(plen, 8); i++)
    pfx |= static_cast<std::uint64_t>(load_byte(pool_, leaf + kOffLeafKey + depth + i)) << (8 * i);
  pool_.store8(node + kOffPrefix, pfx);
  pool_.store8(node + kOffMeta, pack_meta(m.kind, m.count, plen, m.level));
  persist(pool_, node, 16);
  scope.complete();
  locks_.unlock(node);
  fixes_applied_.fetch_add(1, std::memory_order_relaxed);
  return FixResult::Fixed;
}

// --- delete -----------------------------------------------------------

Ack PArt::erase(const Key& key) {
  if (key.size() != key_len_) return Ack::BadArgument;
  PmemPool::OpScope scope(pool_, OpTag::ArtDelete);
  for (;;) {
    bool retry = false;
    PmAddr parent = kNullAddr;
    PmAddr parent_slot = kRootCell;
    PmAddr node = pool_.load8(kRootCell);
    std::uint32_t depth = 0;
    for (unsigned guard = 0;; guard++) {
      if (guard > kMaxKeyLen + 8) throw PoolFault("art: delete descent cycle");
      Meta m = meta_of(node);
      if (depth + m.prefix_len != m.level) {
        FixResult r = detect_and_fix(node, depth);
        if (r == FixResult::Corrupt) return Ack::BadArgument;
        m = meta_of(node);
      }
      if (m.level >= key.size()) {
        scope.complete();
        return Ack::Ok;  // no such path
      }
      PmAddr slot = child_slot(node, m, key.byte(m.level));
      if (slot == kNullAddr || pool_.load8(slot) == kNullAddr) {
        scope.complete();
        return Ack::Ok;
      }
      PmAddr child = pool_.load8(slot);
      if (is_leaf(child)) {
        if (leaf_key(child) != key) {
          scope.complete();
          return Ack::Ok;
        }
        {
          NodeLockGuard guard(locks_, pool_, node);
          if (dead(node) || pool_.load8(slot) != child) {
            retry = true;
            break;
          }
          pool_.store8(slot, kNullAddr);  // single atomic null commit
          persist(pool_, slot, kWordSize);
          alloc_.defer_free(child);
        }
        maybe_shrink(parent, parent_slot, node);
        scope.complete();
        return Ack::Ok;
      }
      parent = node;
      parent_slot = slot;
      depth = m.level + 1;
      node = child;
    }
    if (!retry) break;
  }
  return Ack::Ok;
}

void PArt::maybe_shrink(PmAddr parent, PmAddr parent_slot, PmAddr node) {
  if (parent == kNullAddr) return;  // the root stays N256
  NodeLockGuard guard(locks_, pool_, node);
  NodeLockGuard pguard(locks_, pool_, parent);
  if (dead(node) || dead(parent) || pool_.load8(parent_slot) != node) return;
  Meta m = meta_of(node);
  if (m.kind == kLeaf) return;
  const unsigned live = live_children(node, m);
  std::uint8_t nk;
  if (m.kind == kN256 && live <= 40)
    nk = kN48;
  else if (m.kind == kN48 && live <= 12)
    nk = kN16;
  else if (m.kind == kN16 && live <= 3)
    nk = kN4;
  else if (m.kind == kN4 && live == 0)
    nk = 0;  // drop the node entirely
  else
    return;

  if (nk == 0) {
    pool_.store8(parent_slot, kNullAddr);
    persist(pool_, parent_slot, kWordSize);
    mark_dead(node);
    alloc_.defer_free(node);
    return;
  }
  std::vector<std::pair<std::uint8_t, PmAddr>> kids;
  collect_children(node, m, kids);
  PmAddr fresh = alloc_.alloc(node_bytes(nk), kCacheLineSize, kTagNode);
  if (fresh == kNullAddr) return;  // shrinking is optional
  pool_.store8(fresh + kOffPrefix, pool_.load8(node + kOffPrefix));
  for (unsigned i = 0; i < kids.size(); i++) {
    switch (nk) {
      case kN4:
        store_byte(pool_, fresh + kOffN4Keys + i, kids[i].first);
        pool_.store8(fresh + kOffN4Children + i * 8, kids[i].second);
        break;
      case kN16:
        store_byte(pool_, fresh + kOffN16Keys + i, kids[i].first);
        pool_.store8(fresh + kOffN16Children + i * 8, kids[i].second);
        break;
      default:
        pool_.store8(fresh + kOffN48Children + i * 8, kids[i].second);
        store_byte(pool_, fresh + kOffN48Index + kids[i].first, static_cast<std::uint8_t>(i + 1));
        break;
    }
  }
  pool_.store8(fresh + kOffMeta,
               pack_meta(nk, static_cast<std::uint16_t>(kids.size()), m.prefix_len, m.level));
  persist(pool_, fresh, node_bytes(nk));
  pool_.store8(parent_slot, fresh);  // atomic parent link swap
  persist(pool_, parent_slot, kWordSize);
  mark_dead(node);
  alloc_.defer_free(node);
}

// --- range ------------------------------------------------------------

void PArt::range_walk(PmAddr node, std::uint32_t depth, std::array<std::uint8_t, kMaxKeyLen>& path,
                      const Key* lo, const Key* hi, std::size_t limit,
                      std::vector<std::pair<Key, Value>>& out) const {
  if (out.size() >= limit) return;
  if (is_leaf(node)) {
    Key k = leaf_key(node);
    if (lo && k < *lo) return;
    if (hi && *hi < k) return;
    out.emplace_back(k, leaf_value(node));
    return;
  }
  Meta m = meta_of(node);
  // Fill in this node's prefix bytes so subtree pruning can compare whole
  // key fragments. Stale headers give up pruning accuracy, never correctness:
  // reconstruct from a leaf, which is exact for committed states.
  const std::uint32_t plen = m.level >= depth ? m.level - depth : 0;
  PmAddr rleaf = kNullAddr;
  for (std::uint32_t i = 0; i < plen && depth + i < key_len_; i++) {
    if (depth + m.prefix_len == m.level && i < 8 && i < m.prefix_len) {
      path[depth + i] = load_byte(pool_, node + kOffPrefix + i);
    } else {
      if (rleaf == kNullAddr) rleaf = leftmost_leaf(node);
      if (rleaf == kNullAddr) return;
      path[depth + i] = load_byte(pool_, rleaf + kOffLeafKey + depth + i);
    }
  }
  std::vector<std::pair<std::uint8_t, PmAddr>> kids;
  collect_children(node, m, kids);
  for (auto& [b, child] : kids) {
    if (out.size() >= limit) return;
    path[m.level] = b;
    // Prune on the fragment [0, level]: compare against the bounds.
    const std::size_t n = m.level + 1;
    if (lo) {
      int c = std::memcmp(path.data(), lo->data(), std::min(n, lo->size()));
      if (c < 0) continue;  // whole subtree below lo
    }
    if (hi) {
      int c = std::memcmp(path.data(), hi->data(), std::min(n, hi->size()));
      if (c > 0) return;  // this and all further children above hi
    }
    range_walk(child, m.level + 1, path, lo, hi, limit, out);
  }
}

void PArt::range_query(const Key& lo, const Key& hi,
                       std::vector<std::pair<Key, Value>>& out) const {
  std::array<std::uint8_t, kMaxKeyLen> path{};
  range_walk(pool_.load8(kRootCell), 0, path, &lo, &hi, ~std::size_t{0}, out);
}

void PArt::scan(const Key& start, std::size_t count,
                std::vector<std::pair<Key, Value>>& out) const {
  std::array<std::uint8_t, kMaxKeyLen> path{};
  range_walk(pool_.load8(kRootCell), 0, path, &start, nullptr, count, out);
}

// --- maintenance ---------------------------------------------------------

std::uint64_t PArt::fix_sweep() {
  // Writer-style pass over the whole tree: at every header mismatch run
  // detect_and_fix, exactly as an insert traversing that path would.
  std::uint64_t fixed = 0;
  std::vector<std::pair<PmAddr, std::uint32_t>> stack;
  stack.emplace_back(pool_.load8(kRootCell), 0);
  while (!stack.empty()) {
    auto [node, depth] = stack.back();
    stack.pop_back();
    if (is_leaf(node)) continue;
    Meta m = meta_of(node);
    if (depth + m.prefix_len != m.level) {
      if (detect_and_fix(node, depth) == FixResult::Fixed) fixed++;
      m = meta_of(node);
    }
    std::vector<std::pair<std::uint8_t, PmAddr>> kids;
    collect_children(node, m, kids);
    for (auto& [b, child] : kids) stack.emplace_back(child, m.level + 1);
  }
  return fixed;
}

std::vector<PmAddr> PArt::reachability_roots() const { return {pool_.load8(kRootCell)}; }

ChildWalker PArt::reachability_walker() const {
  const PArt* self = this;
  return [self](const Allocation& a, const std::function<void(PmAddr)>& emit) {
    std::string_view tag(a.tag);
    if (tag != kTagNode) return;
    Meta m = self->meta_of(a.addr);
    std::vector<std::pair<std::uint8_t, PmAddr>> kids;
    self->collect_children(a.addr, m, kids);
    for (auto& [b, child] : kids) emit(child);
  };
}

void PArt::validate_walk(PmAddr node, std::uint32_t depth, std::vector<std::string>& problems,
                         unsigned depth_guard) const {
  if (depth_guard == 0) {
    problems.push_back("tree deeper than the key length allows");
    return;
  }
  if (is_leaf(node)) return;
  Meta m = meta_of(node);
  if (depth + m.prefix_len != m.level)
    problems.push_back("level mismatch at node " + std::to_string(node) + ": depth " +
                       std::to_string(depth) + " + plen " + std::to_string(m.prefix_len) +
                       " != level " + std::to_string(m.level));
  std::vector<std::pair<std::uint8_t, PmAddr>> kids;
  collect_children(node, m, kids);
  for (auto& [b, child] : kids) validate_walk(child, m.level + 1, problems, depth_guard - 1);
}

std::vector<std::string> PArt::validate() const {
  std::vector<std::string> problems;
  validate_walk(pool_.load8(kRootCell), 0, problems, kMaxKeyLen + 2);
  return problems;
}

}  // namespace pmindex
