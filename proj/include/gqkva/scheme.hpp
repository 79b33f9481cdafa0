#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace gqkva {

enum class SchemeKind { Mha, Mqa, Gqa, Mkva, Gkva, Gqkva };

const char* scheme_kind_name(SchemeKind kind);

struct HeadPair {
    int32_t q_group = 0;
    int32_t kv_group = 0;
    bool operator==(const HeadPair&) const = default;
};

// Full description of one grouped-attention variant: embedding size, the
// number of distinct Q and KV projections, and the explicit head ->
// (q group, kv group) pairing schedule. Block-shared variants (gqa/gkva)
// and Cartesian variants (gqkva) both reduce to a pairing list; every head
// must use a distinct pair or it would duplicate another head's output.
struct GroupingScheme {
    int64_t d = 0;         // embedding size
    int64_t h = 0;         // effective heads
    int64_t head_dim = 0;  // d / h
    int64_t g_q = 0;       // distinct Q projections
    int64_t g_kv = 0;      // distinct K,V projection pairs
    std::vector<HeadPair> pairing;
    std::string label;
};

// Pairing schedules:
//   mha          g_q = g_kv = h, head i -> (i, i)
//   mqa          g_q = h, g_kv = 1, head i -> (i, 0)
//   gqa-g        g_q = h, g_kv = g, head i -> (i, floor(i*g/h))
//   mkva         g_q = 1, g_kv = h, head j -> (0, j)
//   gkva-g       g_q = g, g_kv = h, head j -> (floor(j*g/h), j)
//   gqkva-gq.gkv Cartesian, row-major over (q group, kv group), h = gq*gkv
GroupingScheme make_scheme(SchemeKind kind, int64_t d, int64_t h,
                           std::optional<int64_t> g_q = std::nullopt,
                           std::optional<int64_t> g_kv = std::nullopt);

// Every invariant violation, not just the first; empty means well formed.
std::vector<std::string> validate_scheme(const GroupingScheme& s);

// Canonical grammar: mha | mqa | mkva | gqa-<g> | gkva-<g> | gqkva-<gq>.<gkv>,
// case-insensitive.
GroupingScheme parse_scheme(const std::string& label, int64_t d, int64_t h);

// The standard nine-scheme comparison bundle, in canonical report order
// (mha first).
std::vector<std::string> table1_scheme_labels();

// Expands "table1"/"all" or a comma-separated list of scheme labels.
std::vector<std::string> expand_scheme_list(const std::string& spec);

}  // namespace gqkva
