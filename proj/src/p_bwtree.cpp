#include "pmindex/p_bwtree.hpp"

#include <algorithm>
#include <cassert>
#include <deque>
#include <optional>
#include <set>
#include <unordered_set>

namespace pmindex {

namespace {

constexpr std::uint64_t magic_u64(const char (&s)[9]) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; i--) v = (v << 8) | static_cast<std::uint8_t>(s[i]);
  return v;
}

constexpr std::uint64_t kMagic = magic_u64("PBWT0001");
constexpr PmAddr kMagicAddr = 0;
constexpr PmAddr kMapAddrCell = 8;
constexpr PmAddr kRootIdCell = 16;   // swung by CAS on root splits
constexpr PmAddr kNextIdCell = 24;
constexpr PmAddr kKeyLenCell = 32;
constexpr PmAddr kCapacityCell = 40;

enum RecKind : std::uint8_t {
  kBase = 1,
  kInsertDelta = 2,
  kDeleteDelta = 3,
  kSplitDelta = 4,
  kIndexInsertDelta = 5,
  kMergeDelta = 6,
};

// Delta record: one cache line.
constexpr PmAddr kRecTag = 0;    // kind | leaf<<8 | klen<<16
constexpr PmAddr kRecNext = 8;
constexpr PmAddr kRecDepth = 16;
constexpr PmAddr kRecKey = 24;   // 24 bytes
constexpr PmAddr kRecAux = 48;   // value / right_id / victim_id
constexpr std::uint64_t kRecBytes = 64;

// Base node header.
constexpr PmAddr kBaseTag = 0;
constexpr PmAddr kBaseCount = 8;
constexpr PmAddr kBaseRight = 16;      // node id of right sibling, 0 = none
constexpr PmAddr kBaseLowKind = 24;    // 0 = -inf, 1 = finite
constexpr PmAddr kBaseLowKey = 32;
constexpr PmAddr kBaseHighKind = 56;   // 1 = finite, 2 = +inf
constexpr PmAddr kBaseHighKey = 64;
constexpr PmAddr kBaseEntries = 88;
constexpr std::uint64_t kEntryBytes = 32;  // key[24] + value/child id

constexpr std::uint64_t kFrozenBit = 1;  // mapping-slot tag: chain folded away

constexpr const char* kTagMap = "bw/map";
constexpr const char* kTagBaseNode = "bw/base";
constexpr const char* kTagDelta = "bw/delta";

constexpr unsigned kWalkGuard = 100000;

}  // namespace

struct PBwTree::Bound {
  enum Kind : std::uint8_t { NegInf = 0, Finite = 1, PosInf = 2 };
  std::uint8_t kind = NegInf;
  Key key;

  static Bound neg() { return {NegInf, {}}; }
  static Bound pos() { return {PosInf, {}}; }
  static Bound fin(const Key& k) { return {Finite, k}; }
  bool covers_below(const Key& k) const {  // bound as lower: k >= bound
    return kind == NegInf || (kind == Finite && !(k < key));
  }
  bool covers_above(const Key& k) const {  // bound as upper: k < bound
    return kind == PosInf || (kind == Finite && k < key);
  }
};

struct PBwTree::Record {
  PmAddr addr = 0;
  std::uint8_t kind = 0;
  bool leaf = false;
  std::uint8_t klen = 0;
  PmAddr next = 0;
  std::uint64_t depth = 0;
  std::uint64_t aux = 0;
};

struct PBwTree::NodeView {
  bool leaf = false;
  Bound low = Bound::neg();
  Bound high = Bound::pos();
  std::uint64_t next_id = 0;
  std::vector<std::pair<Key, std::uint64_t>> entries;  // leaf: values; internal: child ids
  std::uint64_t depth = 0;
  PmAddr head = 0;
  bool frozen = false;
  std::vector<std::pair<PmAddr, std::uint64_t>> merge_recs;  // (record addr, victim id)
};

// --- decode / encode helpers -------------------------------------------

PBwTree::Record PBwTree::decode(PmAddr addr) const {
  Record r;
  r.addr = addr;
  const std::uint64_t tag = pool_.load8(addr + kRecTag);
  r.kind = static_cast<std::uint8_t>(tag);
  r.leaf = (tag >> 8) & 0xff;
  r.klen = static_cast<std::uint8_t>(tag >> 16);
  if (r.kind != kBase) {
    r.next = pool_.load8(addr + kRecNext);
    r.depth = pool_.load8(addr + kRecDepth);
    r.aux = pool_.load8(addr + kRecAux);
  }
  return r;
}

Key PBwTree::rec_key(PmAddr addr) const {
  std::array<std::uint8_t, kMaxKeyLen> buf;
  pool_.load_bytes(addr, buf);
  return Key::from_bytes(buf.data(), key_len_);
}

void PBwTree::write_key(PmAddr addr, const Key& k) {
  std::array<std::uint8_t, kMaxKeyLen> buf{};
  std::memcpy(buf.data(), k.data(), k.size());
  pool_.store_bytes(addr, buf);
}

PmAddr PBwTree::slot_addr(std::uint64_t id) const {
  return pool_.load8(kMapAddrCell) + id * kWordSize;
}

std::uint64_t PBwTree::slot_raw(std::uint64_t id) const { return pool_.load8(slot_addr(id)); }

std::uint64_t PBwTree::alloc_node_id() {
  const std::uint64_t id = pool_.fetch_add8(kNextIdCell, 1);
  if (id >= pool_.load8(kCapacityCell)) throw PoolFault("bwtree: mapping table exhausted");
  // The counter must be durable before the id becomes reachable, so a crash
  // can never hand the same id out twice.
  persist(pool_, kNextIdCell, kWordSize);
  return id;
}

PmAddr PBwTree::make_delta(std::uint8_t kind, bool leaf, const Key& key, std::uint64_t aux,
                           PmAddr next, std::uint64_t depth) {
  PmAddr rec = alloc_.alloc(kRecBytes, kCacheLineSize, kTagDelta);
  if (rec == kNullAddr) return kNullAddr;
  pool_.store8(rec + kRecTag, static_cast<std::uint64_t>(kind) | (leaf ? 0x100u : 0) |
                                  (static_cast<std::uint64_t>(key.size()) << 16));
  pool_.store8(rec + kRecNext, next);
  pool_.store8(rec + kRecDepth, depth);
  write_key(rec + kRecKey, key);
  pool_.store8(rec + kRecAux, aux);
  persist(pool_, rec, kRecBytes);  // record durable before any CAS can publish it
  return rec;
}

PmAddr PBwTree::build_base(const NodeView& view) {
  const std::uint64_t size = kBaseEntries + kEntryBytes * view.entries.size();
  PmAddr base = alloc_.alloc(std::max<std::uint64_t>(size, kCacheLineSize), kCacheLineSize,
                             kTagBaseNode);
  if (base == kNullAddr) return kNullAddr;
  pool_.store8(base + kBaseTag, static_cast<std::uint64_t>(kBase) | (view.leaf ? 0x100u : 0) |
                                    (static_cast<std::uint64_t>(key_len_) << 16));
  pool_.store8(base + kBaseCount, view.entries.size());
  pool_.store8(base + kBaseRight, view.next_id);
  pool_.store8(base + kBaseLowKind, view.low.kind);
  if (view.low.kind == Bound::Finite) write_key(base + kBaseLowKey, view.low.key);
  pool_.store8(base + kBaseHighKind, view.high.kind);
  if (view.high.kind == Bound::Finite) write_key(base + kBaseHighKey, view.high.key);
  for (std::size_t i = 0; i < view.entries.size(); i++) {
    write_key(base + kBaseEntries + i * kEntryBytes, view.entries[i].first);
    pool_.store8(base + kBaseEntries + i * kEntryBytes + 24, view.entries[i].second);
  }
  persist(pool_, base, size);
  return base;
}

// --- replay -------------------------------------------------------------

PBwTree::NodeView PBwTree::replay(std::uint64_t id, unsigned guard) const {
  if (guard > 8) throw PoolFault("bwtree: merge recursion too deep");
  NodeView view;
  const std::uint64_t raw = slot_raw(id);
  view.frozen = raw & kFrozenBit;
  view.head = raw & ~kFrozenBit;

  std::map<Key, std::optional<std::uint64_t>> decided;
  bool capped = false;
  Key cap;
  std::uint64_t cap_next = 0;
  bool merged = false;
  Bound merged_high = Bound::pos();
  std::uint64_t merged_next = 0;
  // Which record owns the node's final high/next: the newest split or merge
  // wins (a node can re-absorb its own split product, un-doing the cap).
  enum { kBoundBase, kBoundSplit, kBoundMerge } bound_src = kBoundBase;

  PmAddr addr = view.head;
  for (unsigned steps = 0; addr != kNullAddr; steps++) {
    if (steps > kWalkGuard) throw PoolFault("bwtree: chain cycle");
    Record r = decode(addr);
    view.depth = std::max(view.depth, r.depth);
    switch (r.kind) {
      case kInsertDelta: {
        Key k = rec_key(addr + kRecKey);
        if (!capped || k < cap) decided.try_emplace(k, r.aux);
        break;
      }
      case kDeleteDelta: {
        Key k = rec_key(addr + kRecKey);
        decided.try_emplace(k, std::nullopt);
        break;
      }
      case kIndexInsertDelta: {
        Key k = rec_key(addr + kRecKey);
        if (!capped || k < cap) decided.try_emplace(k, r.aux);
        break;
      }
      case kSplitDelta: {
        Key sep = rec_key(addr + kRecKey);
        if (!capped || sep < cap) {
          capped = true;
          cap = sep;
          cap_next = r.aux;
        }
        if (bound_src == kBoundBase) bound_src = kBoundSplit;
        break;
      }
      case kMergeDelta: {
        NodeView sub = replay(r.aux, guard + 1);
        for (auto& [k, v] : sub.entries)
          if (!capped || k < cap) decided.try_emplace(k, v);
        if (!merged) {  // newest merge wins the extension
          merged = true;
          merged_high = sub.high;
          merged_next = sub.next_id;
        }
        if (bound_src == kBoundBase) bound_src = kBoundMerge;
        view.merge_recs.emplace_back(addr, r.aux);
        break;
      }
      case kBase: {
        view.leaf = r.leaf;
        const std::uint64_t count = pool_.load8(addr + kBaseCount);
        for (std::uint64_t i = 0; i < count; i++) {
          Key k = rec_key(addr + kBaseEntries + i * kEntryBytes);
          if (!capped || k < cap)
            decided.try_emplace(k, pool_.load8(addr + kBaseEntries + i * kEntryBytes + 24));
        }
        const std::uint64_t lk = pool_.load8(addr + kBaseLowKind);
        view.low = lk == Bound::Finite ? Bound::fin(rec_key(addr + kBaseLowKey)) : Bound::neg();
        if (bound_src == kBoundSplit) {
          view.high = Bound::fin(cap);
          view.next_id = cap_next;
        } else if (bound_src == kBoundMerge) {
          view.high = merged_high;
          view.next_id = merged_next;
        } else {
          const std::uint64_t hk = pool_.load8(addr + kBaseHighKind);
          view.high = hk == Bound::Finite ? Bound::fin(rec_key(addr + kBaseHighKey)) : Bound::pos();
          view.next_id = pool_.load8(addr + kBaseRight);
        }
        addr = kNullAddr;
        continue;
      }
      default:
        throw PoolFault("bwtree: unknown record kind");
    }
    view.leaf = r.leaf;
    addr = r.next;
  }
  view.entries.reserve(decided.size());
  for (auto& [k, v] : decided)
    if (v) view.entries.emplace_back(k, *v);
  return view;
}

// --- resolution (hot path, no maps) --------------------------------------

std::uint64_t PBwTree::resolve_child(std::uint64_t& id, const Key& key) const {
  for (unsigned jumps = 0; jumps < kWalkGuard; jumps++) {
    PmAddr addr = slot_raw(id) & ~kFrozenBit;
    // chain deltas, newest first; first decision per separator wins
    std::vector<std::pair<Key, std::uint64_t>> adds;
    std::vector<Key> dels;
    bool jumped = false;
    for (unsigned steps = 0; addr != kNullAddr; steps++) {
      if (steps > kWalkGuard) throw PoolFault("bwtree: chain cycle");
      Record r = decode(addr);
      if (r.kind == kIndexInsertDelta) {
        Key sep = rec_key(addr + kRecKey);
        bool decided = std::any_of(adds.begin(), adds.end(),
                                   [&](auto& p) { return p.first == sep; }) ||
                       std::count(dels.begin(), dels.end(), sep);
        if (!decided) adds.emplace_back(sep, r.aux);
      } else if (r.kind == kDeleteDelta) {
        Key sep = rec_key(addr + kRecKey);
        bool decided = std::any_of(adds.begin(), adds.end(),
                                   [&](auto& p) { return p.first == sep; }) ||
                       std::count(dels.begin(), dels.end(), sep);
        if (!decided) dels.push_back(sep);
      } else if (r.kind == kSplitDelta) {
        Key sep = rec_key(addr + kRecKey);
        if (!(key < sep)) {  // side link: key belongs to the new right sibling
          id = r.aux;
          jumped = true;
          break;
        }
      } else if (r.kind == kMergeDelta) {
        // transparent to readers; the B-link jump at the base covers it
      } else if (r.kind == kBase) {
        const std::uint64_t hk = pool_.load8(addr + kBaseHighKind);
        if (hk == Bound::Finite && !(key < rec_key(addr + kBaseHighKey))) {
          id = pool_.load8(addr + kBaseRight);
          jumped = true;
          break;
        }
        // best = greatest separator <= key among base entries and adds,
        // skipping deleted separators. Entry 0 acts as the low fence.
        const std::uint64_t count = pool_.load8(addr + kBaseCount);
        bool have = false;
        Key best_key;
        std::uint64_t best_child = 0;
        std::int64_t lo = 0, hi = static_cast<std::int64_t>(count) - 1, pos = -1;
        while (lo <= hi) {
          std::int64_t mid = (lo + hi) / 2;
          Key k = rec_key(addr + kBaseEntries + mid * kEntryBytes);
          if (mid == 0 || !(key < k)) {
            pos = mid;
            lo = mid + 1;
          } else {
            hi = mid - 1;
          }
        }
        for (; pos >= 0; pos--) {
          Key k = rec_key(addr + kBaseEntries + pos * kEntryBytes);
          if (std::count(dels.begin(), dels.end(), k)) continue;
          if (std::any_of(adds.begin(), adds.end(), [&](auto& p) { return p.first == k; }))
            continue;  // delta overrides the base entry
          have = true;
          best_key = k;
          best_child = pool_.load8(addr + kBaseEntries + pos * kEntryBytes + 24);
          break;
        }
        for (auto& [sep, child] : adds) {
          if (key < sep) continue;
          if (!have || best_key < sep) {
            have = true;
            best_key = sep;
            best_child = child;
          }
        }
        if (!have) throw PoolFault("bwtree: internal node with no route");
        return best_child;
      }
      addr = r.next;
    }
    if (!jumped) throw PoolFault("bwtree: internal chain without base");
  }
  throw PoolFault("bwtree: unbounded side-link walk");
}

std::optional<Value> PBwTree::resolve_leaf(std::uint64_t id, const Key& key) const {
  for (unsigned jumps = 0; jumps < kWalkGuard; jumps++) {
    PmAddr addr = slot_raw(id) & ~kFrozenBit;
    bool jumped = false;
    for (unsigned steps = 0; addr != kNullAddr; steps++) {
      if (steps > kWalkGuard) throw PoolFault("bwtree: chain cycle");
      Record r = decode(addr);
      if (r.kind == kInsertDelta) {
        if (rec_key(addr + kRecKey) == key) return r.aux;
      } else if (r.kind == kDeleteDelta) {
        if (rec_key(addr + kRecKey) == key) return std::nullopt;
      } else if (r.kind == kSplitDelta) {
        if (!(key < rec_key(addr + kRecKey))) {
          id = r.aux;
          jumped = true;
          break;
        }
      } else if (r.kind == kMergeDelta) {
        // fall through: the victim is reached via the base right link
      } else if (r.kind == kBase) {
        const std::uint64_t hk = pool_.load8(addr + kBaseHighKind);
        if (hk == Bound::Finite && !(key < rec_key(addr + kBaseHighKey))) {
          id = pool_.load8(addr + kBaseRight);
          if (id == 0) return std::nullopt;
          jumped = true;
          break;
        }
        const std::uint64_t count = pool_.load8(addr + kBaseCount);
        std::int64_t lo = 0, hi = static_cast<std::int64_t>(count) - 1;
        while (lo <= hi) {
          std::int64_t mid = (lo + hi) / 2;
          Key k = rec_key(addr + kBaseEntries + mid * kEntryBytes);
          if (k == key) return pool_.load8(addr + kBaseEntries + mid * kEntryBytes + 24);
          if (k < key)
            lo = mid + 1;
          else
            hi = mid - 1;
        }
        return std::nullopt;
      }
      addr = r.next;
    }
    if (!jumped) throw PoolFault("bwtree: leaf chain without base");
  }
  throw PoolFault("bwtree: unbounded side-link walk");
}

std::uint64_t PBwTree::find_leaf_for_read(const Key& key) const {
  std::uint64_t id = pool_.load8(kRootIdCell);
  for (unsigned depth = 0; depth < kWalkGuard; depth++) {
    PmAddr head = slot_raw(id) & ~kFrozenBit;
    if (decode(head).leaf) return id;
    id = resolve_child(id, key);
  }
  throw PoolFault("bwtree: descent did not terminate");
}

// Side-link routing at a leaf: the id to jump to when this chain no longer
// covers the key, or nullopt when the key is in range.
std::optional<std::uint64_t> PBwTree::leaf_route(std::uint64_t id, const Key& key) const {
  PmAddr addr = slot_raw(id) & ~kFrozenBit;
  for (unsigned steps = 0; addr != kNullAddr && steps < kWalkGuard; steps++) {
    Record r = decode(addr);
    if (r.kind == kSplitDelta) {
      if (!(key < rec_key(addr + kRecKey))) return r.aux;
    } else if (r.kind == kBase) {
      const std::uint64_t hk = pool_.load8(addr + kBaseHighKind);
      if (hk == Bound::Finite && !(key < rec_key(addr + kBaseHighKey)))
        return pool_.load8(addr + kBaseRight);
      return std::nullopt;
    }
    addr = r.next;
  }
  throw PoolFault("bwtree: leaf chain without base");
}

std::uint64_t PBwTree::find_leaf_for_write(const Key& key) {
  std::uint64_t id = pool_.load8(kRootIdCell);
  for (unsigned depth = 0; depth < kWalkGuard; depth++) {
    help_if_needed(id);
    PmAddr head = slot_raw(id) & ~kFrozenBit;
    if (decode(head).leaf) {
      // A pending split or an already-consolidated sibling may own the key;
      // follow the side links until the chain covers it.
      auto jump = leaf_route(id, key);
      if (!jump) return id;
      if (*jump == 0) return id;  // rightmost leaf covers everything above
      id = *jump;
      continue;
    }
    id = resolve_child(id, key);
  }
  throw PoolFault("bwtree: descent did not terminate");
}

// --- helping -------------------------------------------------------------

void PBwTree::help_if_needed(std::uint64_t id) {
  const std::uint64_t raw = slot_raw(id);
  if (raw & kFrozenBit) return;
  Record r = decode(raw);
  if (r.kind == kSplitDelta) {
    std::uint64_t vis = 0;
    complete_split(id, raw, vis);
    std::lock_guard g(stats_mu_);
    stats_.helper_completions++;
  } else if (r.kind == kMergeDelta) {
    std::uint64_t vis = 0;
    complete_merge(id, raw, vis);
    std::lock_guard g(stats_mu_);
    stats_.helper_completions++;
  }
}

void PBwTree::complete_split(std::uint64_t child_id, PmAddr split_rec, std::uint64_t& vis) {
  const Key sep = rec_key(split_rec + kRecKey);
  const std::uint64_t right_id = decode(split_rec).aux;
  if (!faults_.bwtree_skip_helper_load_flush) {
    // Every loaded word step 2 depends on is flushed and fenced first: the
    // child's slot word (the step-1 swing) and the split record itself.
    pool_.flush_line(slot_addr(child_id));
    pool_.flush_line(split_rec);
    pool_.fence();
  }
  if (pool_.load8(kRootIdCell) == child_id) {
    // Root split: the new root is published by a single CAS on the root cell.
    NodeView nr;
    nr.leaf = false;
    nr.low = Bound::neg();
    nr.high = Bound::pos();
    nr.next_id = 0;
    nr.entries.emplace_back(Key{}, child_id);  // entry 0 = low fence
    nr.entries.emplace_back(sep, right_id);
    PmAddr base = build_base(nr);
    if (base == kNullAddr) return;
    std::uint64_t nid = alloc_node_id();
    pool_.store8(slot_addr(nid), base);
    vis++;
    persist(pool_, slot_addr(nid), kWordSize);
    if (pool_.cas8(kRootIdCell, child_id, nid)) {
      vis++;
      persist(pool_, kRootIdCell, kWordSize);
    }
    return;
  }
  for (unsigned tries = 0; tries < kWalkGuard; tries++) {
    std::uint64_t parent = locate_parent(child_id, sep);
    if (parent == 0) return;  // no longer routed: completed and consolidated
    NodeView pview = replay(parent);
    auto it = std::find_if(pview.entries.begin(), pview.entries.end(),
                           [&](auto& e) { return e.first == sep; });
    if (it != pview.entries.end()) return;  // already posted
    if (pview.frozen) continue;
    PmAddr rec = make_delta(kIndexInsertDelta, false, sep, right_id, pview.head, pview.depth + 1);
    if (rec == kNullAddr) return;
    if (pool_.cas8(slot_addr(parent), pview.head, rec)) {
      vis++;
      persist(pool_, slot_addr(parent), kWordSize);
      return;
    }
    alloc_.defer_free(rec);
  }
}

void PBwTree::complete_merge(std::uint64_t left_id, PmAddr merge_rec, std::uint64_t& vis) {
  const std::uint64_t victim_id = decode(merge_rec).aux;
  if (!faults_.bwtree_skip_helper_load_flush) {
    pool_.flush_line(slot_addr(left_id));
    pool_.flush_line(merge_rec);
    pool_.fence();
  }
  NodeView vview = replay(victim_id);
  if (vview.low.kind != Bound::Finite) return;
  const Key sep = vview.low.key;
  for (unsigned tries = 0; tries < kWalkGuard; tries++) {
    std::uint64_t parent = locate_parent(victim_id, sep);
    if (parent == 0) return;  // separator already removed
    NodeView pview = replay(parent);
    auto it = std::find_if(pview.entries.begin(), pview.entries.end(),
                           [&](auto& e) { return e.first == sep && e.second == victim_id; });
    if (it == pview.entries.end()) return;
    if (it == pview.entries.begin()) return;  // never remove the low fence
    if (pview.frozen) continue;
    PmAddr rec = make_delta(kDeleteDelta, false, sep, 0, pview.head, pview.depth + 1);
    if (rec == kNullAddr) return;
    if (pool_.cas8(slot_addr(parent), pview.head, rec)) {
      vis++;
      persist(pool_, slot_addr(parent), kWordSize);
      return;
    }
    alloc_.defer_free(rec);
  }
}

std::uint64_t PBwTree::locate_parent(std::uint64_t child_id, const Key& sep) const {
  std::uint64_t id = pool_.load8(kRootIdCell);
  if (id == child_id) return 0;
  for (unsigned depth = 0; depth < kWalkGuard; depth++) {
    PmAddr head = slot_raw(id) & ~kFrozenBit;
    if (decode(head).leaf) return 0;
    std::uint64_t effective = id;
    std::uint64_t next = resolve_child(effective, sep);
    if (next == child_id) return effective;
    if (next == 0) return 0;
    id = next;
  }
  return 0;
}

// --- public operations ----------------------------------------------------

Ack PBwTree::upsert_delta(std::uint8_t kind, const Key& key, Value value, OpTag tag) {
  PmemPool::OpScope scope(pool_, tag);
  for (unsigned tries = 0; tries < kWalkGuard; tries++) {
    std::uint64_t id = find_leaf_for_write(key);
    const std::uint64_t raw = slot_raw(id);
    if (raw & kFrozenBit) continue;  // chain folded under us; restart from root
    const Record head = decode(raw);
    const std::uint64_t depth = head.kind == kBase ? 0 : head.depth;
    PmAddr rec = make_delta(kind, true, key, value, raw, depth + 1);
    if (rec == kNullAddr) return Ack::PoolFull;
    if (pool_.cas8(slot_addr(id), raw, rec)) {
      // Flush only on CAS success; the slot word is the only dirt besides the
      // already-persisted record.
      persist(pool_, slot_addr(id), kWordSize);
      scope.complete();
      if (depth + 1 >= opts_.consolidate_depth) maintain(id);
      return Ack::Ok;
    }
    alloc_.defer_free(rec);  // loser aborts and restarts from the root
  }
  throw PoolFault("bwtree: upsert live-lock");
}

Ack PBwTree::insert(const Key& key, Value value) {
  if (key.size() != key_len_) return Ack::BadArgument;
  return upsert_delta(kInsertDelta, key, value, OpTag::BwInsert);
}

Ack PBwTree::erase(const Key& key) {
  if (key.size() != key_len_) return Ack::BadArgument;
  return upsert_delta(kDeleteDelta, key, 0, OpTag::BwDelete);
}

std::optional<Value> PBwTree::lookup(const Key& key) const {
  if (key.size() != key_len_) return std::nullopt;
  return resolve_leaf(find_leaf_for_read(key), key);
}

void PBwTree::range_query(const Key& lo, const Key& hi,
                          std::vector<std::pair<Key, Value>>& out) const {
  std::uint64_t id = find_leaf_for_read(lo);
  for (unsigned hops = 0; hops < kWalkGuard && id != 0; hops++) {
    NodeView view = replay(id);
    for (auto& [k, v] : view.entries) {
      if (k < lo) continue;
      if (hi < k) return;
      out.emplace_back(k, v);
    }
    if (view.high.kind == Bound::PosInf || hi < view.high.key) return;
    id = view.next_id;
  }
}

void PBwTree::scan(const Key& start, std::size_t count,
                   std::vector<std::pair<Key, Value>>& out) const {
  std::uint64_t id = find_leaf_for_read(start);
  for (unsigned hops = 0; hops < kWalkGuard && id != 0 && out.size() < count; hops++) {
    NodeView view = replay(id);
    for (auto& [k, v] : view.entries) {
      if (k < start) continue;
      if (out.size() >= count) return;
      out.emplace_back(k, v);
    }
    if (view.high.kind == Bound::PosInf) return;
    id = view.next_id;
  }
}

// --- maintenance -----------------------------------------------------------

void PBwTree::maintain(std::uint64_t id) {
  if (!consolidate(id)) return;
  NodeView view = replay(id);
  if (view.frozen) return;
  if (view.entries.size() > opts_.max_pairs) {
    split_smo(id);
  } else if (view.leaf && view.entries.size() < opts_.min_pairs) {
    merge_smo(id);
  }
}

void PBwTree::retire_chain(PmAddr head) {
  PmAddr addr = head;
  for (unsigned steps = 0; addr != kNullAddr && steps < kWalkGuard; steps++) {
    Record r = decode(addr);
    alloc_.defer_free(addr);
    if (r.kind == kBase) break;
    addr = r.next;
  }
}

bool PBwTree::consolidate(std::uint64_t id) {
  PmemPool::OpScope scope(pool_, OpTag::BwConsolidate);
  std::uint64_t vis = 0;
  NodeView view = replay(id);
  if (view.frozen) return false;

  // Fold in-progress merges only after their parent separator is removed and
  // the victim slot is frozen, so a straggler writer can never land a delta
  // on a chain this replay no longer observes.
  std::vector<std::uint64_t> frozen_victims;
  for (auto& [rec, victim] : view.merge_recs) {
    complete_merge(id, rec, vis);  // idempotent
    const std::uint64_t vraw = slot_raw(victim);
    if (vraw & kFrozenBit) {
      frozen_victims.push_back(victim);
      continue;
    }
    // The freeze bit changes no logical content; it only stops stragglers
    // from prepending to a chain the fold no longer observes.
    if (!pool_.cas8(slot_addr(victim), vraw, vraw | kFrozenBit)) return false;
    persist(pool_, slot_addr(victim), kWordSize);
    frozen_victims.push_back(victim);
  }
  if (!view.merge_recs.empty()) view = replay(id);  // re-read after freezing

  PmAddr base = build_base(view);
  if (base == kNullAddr) return false;
  if (!pool_.cas8(slot_addr(id), view.head, base)) {
    alloc_.defer_free(base);  // abandoned copy, reported as leaked until reclaim
    return false;
  }
  vis++;
  persist(pool_, slot_addr(id), kWordSize);
  retire_chain(view.head);
  for (std::uint64_t victim : frozen_victims) retire_chain(slot_raw(victim) & ~kFrozenBit);
  {
    std::lock_guard g(stats_mu_);
    stats_.consolidations++;
    stats_.max_visibility_stores = std::max(stats_.max_visibility_stores, vis);
  }
  scope.complete();
  return true;
}

void PBwTree::record_smo_vis(std::uint64_t vis) {
  std::lock_guard g(stats_mu_);
  stats_.max_visibility_stores = std::max(stats_.max_visibility_stores, vis);
}

void PBwTree::split_smo(std::uint64_t id) {
  PmemPool::OpScope scope(pool_, OpTag::BwSplit);
  std::uint64_t vis = 0;
  const std::uint64_t raw = slot_raw(id);
  if (raw & kFrozenBit) return;
  if (decode(raw).kind != kBase) return;  // deltas arrived; retry on a later pass
  NodeView view = replay(id);
  if (view.entries.size() <= opts_.max_pairs) return;

  const std::size_t mid = view.entries.size() / 2;
  const Key sep = view.entries[mid].first;

  // Step 1: fully persist the right sibling, publish it in a fresh slot, then
  // make the split visible with one CAS on the child chain.
  NodeView right;
  right.leaf = view.leaf;
  right.low = Bound::fin(sep);
  right.high = view.high;
  right.next_id = view.next_id;
  right.entries.assign(view.entries.begin() + mid, view.entries.end());
  PmAddr rbase = build_base(right);
  if (rbase == kNullAddr) return;
  const std::uint64_t rid = alloc_node_id();
  pool_.store8(slot_addr(rid), rbase);
  vis++;
  persist(pool_, slot_addr(rid), kWordSize);

  PmAddr split_rec = make_delta(kSplitDelta, view.leaf, sep, rid, raw, view.depth + 1);
  if (split_rec == kNullAddr) return;
  if (!pool_.cas8(slot_addr(id), raw, split_rec)) {
    alloc_.defer_free(split_rec);  // rid and rbase stay as reported leaks
    return;
  }
  vis++;
  persist(pool_, slot_addr(id), kWordSize);

  // Step 2: post the separator to the parent (or grow a new root).
  complete_split(id, split_rec, vis);
  {
    std::lock_guard g(stats_mu_);
    stats_.splits++;
    stats_.max_visibility_stores = std::max(stats_.max_visibility_stores, vis);
  }
  scope.complete();
}

void PBwTree::merge_smo(std::uint64_t victim_id) {
  PmemPool::OpScope scope(pool_, OpTag::BwMerge);
  std::uint64_t vis = 0;
  NodeView vview = replay(victim_id);
  if (vview.frozen || !vview.leaf) return;
  if (vview.low.kind != Bound::Finite) return;  // leftmost spine never merges left
  if (vview.entries.size() >= opts_.min_pairs) return;
  const Key sep = vview.low.key;

  const std::uint64_t parent = locate_parent(victim_id, sep);
  if (parent == 0) return;
  NodeView pview = replay(parent);
  std::size_t idx = pview.entries.size();
  for (std::size_t i = 0; i < pview.entries.size(); i++) {
    if (pview.entries[i].first == sep && pview.entries[i].second == victim_id) idx = i;
  }
  if (idx == pview.entries.size() || idx == 0) return;  // unposted split or leftmost
  const std::uint64_t left_id = pview.entries[idx - 1].second;
  NodeView lview = replay(left_id);
  if (lview.frozen || lview.next_id != victim_id) return;  // not physically adjacent

  // Step 1: merge delta on the left sibling referencing the victim's chain.
  PmAddr rec = make_delta(kMergeDelta, vview.leaf, Key{}, victim_id, lview.head, lview.depth + 1);
  if (rec == kNullAddr) return;
  if (!pool_.cas8(slot_addr(left_id), lview.head, rec)) {
    alloc_.defer_free(rec);
    return;
  }
  vis++;
  persist(pool_, slot_addr(left_id), kWordSize);

  // Step 2: drop the victim's separator from the parent.
  complete_merge(left_id, rec, vis);
  {
    std::lock_guard g(stats_mu_);
    stats_.merges++;
    stats_.max_visibility_stores = std::max(stats_.max_visibility_stores, vis);
  }
  scope.complete();
  if (replay(left_id).depth >= opts_.consolidate_depth) consolidate(left_id);
}

// --- open ------------------------------------------------------------------

std::unique_ptr<PBwTree> PBwTree::open(PmemPool& pool, PmAllocator& alloc, LockTable& locks,
                                       std::size_t key_len, Options opts, FaultInjection faults) {
  locks.reset_all();  // the index itself is lock-free; kept for the open contract
  auto tree = std::unique_ptr<PBwTree>(new PBwTree(pool, alloc, key_len, opts, faults));
  const std::uint64_t magic = pool.load8(kMagicAddr);
  if (magic == 0) {
    PmemPool::OpScope scope(pool, OpTag::Init);
    PmAddr map = alloc.alloc(opts.mapping_slots * kWordSize, kCacheLineSize, kTagMap);
    if (map == kNullAddr) throw std::runtime_error("bwtree: pool too small for mapping table");
    NodeView empty;
    empty.leaf = true;
    PmAddr base = tree->build_base(empty);
    if (base == kNullAddr) throw std::runtime_error("bwtree: pool too small");
    pool.store8(map + 1 * kWordSize, base);  // node id 0 is reserved
    persist(pool, map + 1 * kWordSize, kWordSize);
    pool.store8(kMapAddrCell, map);
    pool.store8(kRootIdCell, 1);
    pool.store8(kNextIdCell, 2);
    pool.store8(kKeyLenCell, key_len);
    pool.store8(kCapacityCell, opts.mapping_slots);
    pool.store8(kMagicAddr, kMagic);
    persist(pool, kMagicAddr, kCacheLineSize);
    scope.complete();
  } else if (magic != kMagic) {
    throw std::runtime_error("bwtree: unrecognized root magic");
  } else if (pool.load8(kKeyLenCell) != key_len) {
    throw std::runtime_error("bwtree: key length mismatch");
  }
  return tree;
}

std::unique_ptr<PBwTree> PBwTree::open(PmemPool& pool, PmAllocator& alloc, LockTable& locks,
                                       std::size_t key_len) {
  return open(pool, alloc, locks, key_len, Options{}, FaultInjection{});
}

PBwTree::SmoStats PBwTree::smo_stats() const {
  std::lock_guard g(stats_mu_);
  return stats_;
}

// --- audits ------------------------------------------------------------------

std::vector<PmAddr> PBwTree::reachability_roots() const { return {pool_.load8(kMapAddrCell)}; }

ChildWalker PBwTree::reachability_walker() const {
  const PBwTree* self = this;
  PmemPool* pool = &pool_;
  return [self, pool](const Allocation& a, const std::function<void(PmAddr)>& emit) {
    std::string_view tag(a.tag);
    if (tag == kTagMap) {
      const std::uint64_t cap = pool->load8(kCapacityCell);
      for (std::uint64_t id = 0; id < cap; id++) {
        const std::uint64_t raw = pool->load8(a.addr + id * kWordSize);
        if (raw != 0 && !(raw & kFrozenBit)) emit(raw);
      }
    } else if (tag == kTagDelta) {
      Record r = self->decode(a.addr);
      emit(r.next);
    }
    // base nodes reference children by id; the mapping table covers them
  };
}

std::vector<std::string> PBwTree::validate() const {
  std::vector<std::string> problems;
  std::deque<std::uint64_t> queue{pool_.load8(kRootIdCell)};
  std::set<std::uint64_t> seen;
  while (!queue.empty()) {
    std::uint64_t id = queue.front();
    queue.pop_front();
    if (!seen.insert(id).second) continue;
    NodeView view;
    try {
      view = replay(id);
    } catch (const PoolFault& f) {
      problems.push_back("replay failed at node " + std::to_string(id) + ": " + f.what());
      continue;
    }
    for (std::size_t i = 0; i + 1 < view.entries.size(); i++) {
      if (!(view.entries[i].first < view.entries[i + 1].first)) {
        problems.push_back("entries out of order at node " + std::to_string(id));
        break;
      }
    }
    for (auto& [k, v] : view.entries) {
      if (!view.low.covers_below(k) || (view.leaf && !view.high.covers_above(k))) {
        problems.push_back("entry outside bounds at node " + std::to_string(id) + " key " +
                           std::to_string(k.as_u64()) + " low " +
                           (view.low.kind == 1 ? std::to_string(view.low.key.as_u64()) : std::string("-inf")) +
                           " high " +
                           (view.high.kind == 1 ? std::to_string(view.high.key.as_u64()) : std::string("+inf")) +
                           (view.leaf ? " leaf" : " internal"));
        break;
      }
    }
    if (!view.leaf)
      for (auto& [k, child] : view.entries) queue.push_back(child);
    if (view.next_id != 0 && !view.leaf) queue.push_back(view.next_id);
  }
  return problems;
}

std::vector<std::string> PBwTree::check_persist_order() const {
  // On a reopened crash state: a parent-side SMO delta still on a chain must
  // have its child-side step-one state present, or persistence ran out of
  // order (the helper skipped its flush-after-load).
  std::vector<std::string> problems;

  // Collect every reachable node id.
  std::set<std::uint64_t> ids;
  std::deque<std::uint64_t> queue{pool_.load8(kRootIdCell)};
  while (!queue.empty()) {
    std::uint64_t id = queue.front();
    queue.pop_front();
    if (id == 0 || !ids.insert(id).second) continue;
    NodeView view;
    try {
      view = replay(id);
    } catch (const PoolFault&) {
      continue;
    }
    if (!view.leaf)
      for (auto& [k, child] : view.entries) queue.push_back(child);
    if (view.next_id != 0) queue.push_back(view.next_id);
    PmAddr addr = slot_raw(id) & ~kFrozenBit;
    for (unsigned steps = 0; addr != kNullAddr && steps < kWalkGuard; steps++) {
      Record r = decode(addr);
      if (r.kind == kBase) break;
      if (r.kind == kSplitDelta || r.kind == kMergeDelta) queue.push_back(r.aux);
      addr = r.next;
    }
  }

  // Edges provided by step-one artifacts: split deltas and base right links.
  std::set<std::pair<Key, std::uint64_t>> split_edges;  // (sep, right_id)
  std::set<std::uint64_t> right_linked;
  std::map<std::uint64_t, std::set<std::uint64_t>> merge_edges;  // left -> victims
  for (std::uint64_t id : ids) {
    PmAddr addr = slot_raw(id) & ~kFrozenBit;
    for (unsigned steps = 0; addr != kNullAddr && steps < kWalkGuard; steps++) {
      Record r = decode(addr);
      if (r.kind == kBase) {
        right_linked.insert(pool_.load8(addr + kBaseRight));
        break;
      }
      if (r.kind == kSplitDelta) split_edges.insert({rec_key(addr + kRecKey), r.aux});
      if (r.kind == kMergeDelta) merge_edges[id].insert(r.aux);
      addr = r.next;
    }
  }

  for (std::uint64_t id : ids) {
    PmAddr addr = slot_raw(id) & ~kFrozenBit;
    std::set<Key> decided;  // newer records shadow older ones for the same separator
    for (unsigned steps = 0; addr != kNullAddr && steps < kWalkGuard; steps++) {
      Record r = decode(addr);
      if (r.kind == kBase) break;
      if (r.kind == kIndexInsertDelta) {
        const Key sep = rec_key(addr + kRecKey);
        if (!decided.insert(sep).second) {
          addr = r.next;
          continue;
        }
        if (!split_edges.count({sep, r.aux}) && !right_linked.count(r.aux))
          problems.push_back("index-insert delta for node " + std::to_string(r.aux) +
                             " persisted before its split delta");
      } else if (r.kind == kDeleteDelta && !r.leaf) {
        const Key sep = rec_key(addr + kRecKey);
        if (!decided.insert(sep).second) {
          addr = r.next;
          continue;
        }
        // The node now covering sep must absorb the victim: either a merge
        // delta references it or a consolidated base already straddles sep.
        std::uint64_t node = pool_.load8(kRootIdCell);
        std::optional<bool> ok;
        try {
          for (unsigned d = 0; d < kWalkGuard; d++) {
            PmAddr head = slot_raw(node) & ~kFrozenBit;
            if (decode(head).leaf) break;
            node = resolve_child(node, sep);
          }
          NodeView leafv = replay(node);
          if (leafv.low.kind == Bound::NegInf || leafv.low.key < sep)
            ok = true;  // absorbed into a straddling node
          else if (!merge_edges.empty()) {
            ok = false;
            for (auto& [left, victims] : merge_edges) {
              NodeView lv = replay(left);
              for (std::uint64_t v : victims) {
                NodeView vv = replay(v);
                if (vv.low.kind == Bound::Finite && vv.low.key == sep) ok = true;
              }
            }
          } else {
            ok = false;
          }
        } catch (const PoolFault&) {
          ok = false;
        }
        if (!ok.value_or(false))
          problems.push_back("separator removal persisted before its merge delta (sep at node " +
                             std::to_string(id) + ")");
      }
      addr = r.next;
    }
  }
  return problems;
}

}  // namespace pmindex
