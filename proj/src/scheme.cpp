#include "gqkva/scheme.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "gqkva/tensor.hpp"

namespace gqkva {

const char* scheme_kind_name(SchemeKind kind) {
    switch (kind) {
        case SchemeKind::Mha: return "mha";
        case SchemeKind::Mqa: return "mqa";
        case SchemeKind::Gqa: return "gqa";
        case SchemeKind::Mkva: return "mkva";
        case SchemeKind::Gkva: return "gkva";
        case SchemeKind::Gqkva: return "gqkva";
    }
    return "?";
}

GroupingScheme make_scheme(SchemeKind kind, int64_t d, int64_t h, std::optional<int64_t> g_q,
                           std::optional<int64_t> g_kv) {
    if (d <= 0 || h <= 0) {
        throw ConfigError("scheme: d and h must be positive, got d=" + std::to_string(d) +
                          " h=" + std::to_string(h));
    }
    if (d % h != 0) {
        throw ConfigError("scheme: d must be divisible by h, got d=" + std::to_string(d) +
                          " h=" + std::to_string(h));
    }
    GroupingScheme s;
    s.d = d;
    s.h = h;
    s.head_dim = d / h;
    std::ostringstream label;
    switch (kind) {
        case SchemeKind::Mha:
            s.g_q = h;
            s.g_kv = h;
            for (int64_t i = 0; i < h; ++i) {
                s.pairing.push_back({static_cast<int32_t>(i), static_cast<int32_t>(i)});
            }
            label << "mha";
            break;
        case SchemeKind::Mqa:
            s.g_q = h;
            s.g_kv = 1;
            for (int64_t i = 0; i < h; ++i) {
                s.pairing.push_back({static_cast<int32_t>(i), 0});
            }
            label << "mqa";
            break;
        case SchemeKind::Gqa: {
            if (!g_kv.has_value()) throw ConfigError("gqa requires a group count g");
            const int64_t g = *g_kv;
            if (g < 1 || h % g != 0) {
                throw ConfigError("gqa-" + std::to_string(g) + ": h=" + std::to_string(h) +
                                  " must be divisible by g");
            }
            s.g_q = h;
            s.g_kv = g;
            // Contiguous query blocks share one KV pair.
            for (int64_t i = 0; i < h; ++i) {
                s.pairing.push_back(
                    {static_cast<int32_t>(i), static_cast<int32_t>(i * g / h)});
            }
            label << "gqa-" << g;
            break;
        }
        case SchemeKind::Mkva:
            s.g_q = 1;
            s.g_kv = h;
            for (int64_t j = 0; j < h; ++j) {
                s.pairing.push_back({0, static_cast<int32_t>(j)});
            }
            label << "mkva";
            break;
        case SchemeKind::Gkva: {
            if (!g_q.has_value()) throw ConfigError("gkva requires a group count g");
            const int64_t g = *g_q;
            if (g < 1 || h % g != 0) {
                throw ConfigError("gkva-" + std::to_string(g) + ": h=" + std::to_string(h) +
                                  " must be divisible by g");
            }
            s.g_q = g;
            s.g_kv = h;
            for (int64_t j = 0; j < h; ++j) {
                s.pairing.push_back(
                    {static_cast<int32_t>(j * g / h), static_cast<int32_t>(j)});
            }
            label << "gkva-" << g;
            break;
        }
        case SchemeKind::Gqkva: {
            if (!g_q.has_value() || !g_kv.has_value()) {
                throw ConfigError("gqkva requires both group counts g_q and g_kv");
            }
            const int64_t gq = *g_q, gkv = *g_kv;
            if (gq < 1 || gkv < 1 || gq * gkv != h) {
                throw ConfigError("gqkva-" + std::to_string(gq) + "." + std::to_string(gkv) +
                                  ": g_q*g_kv must equal h (" + std::to_string(gq) + "*" +
                                  std::to_string(gkv) + " != " + std::to_string(h) + ")");
            }
            s.g_q = gq;
            s.g_kv = gkv;
            for (int64_t i = 0; i < gq; ++i) {
                for (int64_t j = 0; j < gkv; ++j) {
                    s.pairing.push_back({static_cast<int32_t>(i), static_cast<int32_t>(j)});
                }
            }
            label << "gqkva-" << gq << "." << gkv;
            break;
        }
    }
    s.label = label.str();
    return s;
}

std::vector<std::string> validate_scheme(const GroupingScheme& s) {
    std::vector<std::string> violations;
    if (s.d <= 0 || s.h <= 0) {
        violations.push_back("d and h must be positive");
        return violations;
    }
    if (s.d % s.h != 0) {
        violations.push_back("d=" + std::to_string(s.d) + " not divisible by h=" +
                             std::to_string(s.h));
    } else if (s.head_dim != s.d / s.h) {
        violations.push_back("head_dim " + std::to_string(s.head_dim) + " != d/h");
    }
    if (s.g_q < 1 || s.g_q > s.h) {
        violations.push_back("g_q=" + std::to_string(s.g_q) + " outside [1, h]");
    }
    if (s.g_kv < 1 || s.g_kv > s.h) {
        violations.push_back("g_kv=" + std::to_string(s.g_kv) + " outside [1, h]");
    }
    if (static_cast<int64_t>(s.pairing.size()) != s.h) {
        violations.push_back("pairing has " + std::to_string(s.pairing.size()) +
                             " entries, expected h=" + std::to_string(s.h));
    }
    std::set<std::pair<int32_t, int32_t>> seen;
    std::set<int32_t> q_used, kv_used;
    for (const HeadPair& p : s.pairing) {
        if (p.q_group < 0 || p.q_group >= s.g_q) {
            violations.push_back("q index " + std::to_string(p.q_group) + " outside [0, g_q)");
        }
        if (p.kv_group < 0 || p.kv_group >= s.g_kv) {
            violations.push_back("kv index " + std::to_string(p.kv_group) +
                                 " outside [0, g_kv)");
        }
        if (!seen.insert({p.q_group, p.kv_group}).second) {
            violations.push_back("duplicate pair (" + std::to_string(p.q_group) + "," +
                                 std::to_string(p.kv_group) + ")");
        }
        q_used.insert(p.q_group);
        kv_used.insert(p.kv_group);
    }
    for (int32_t i = 0; i < s.g_q; ++i) {
        if (!q_used.count(i)) {
            violations.push_back("unused projection group: q index " + std::to_string(i));
        }
    }
    for (int32_t j = 0; j < s.g_kv; ++j) {
        if (!kv_used.count(j)) {
            violations.push_back("unused projection group: kv index " + std::to_string(j));
        }
    }
    return violations;
}

namespace {

std::string to_lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

int64_t parse_positive_int(const std::string& text, const std::string& label) {
    if (text.empty() || text.size() > 9 ||
        !std::all_of(text.begin(), text.end(),
                     [](unsigned char c) { return std::isdigit(c); })) {
        throw ConfigError("cannot parse scheme '" + label +
                          "': expected mha | mqa | mkva | gqa-<g> | gkva-<g> | "
                          "gqkva-<gq>.<gkv>");
    }
    return std::stoll(text);
}

}  // namespace

GroupingScheme parse_scheme(const std::string& raw, int64_t d, int64_t h) {
    const std::string label = to_lower(raw);
    if (label == "mha") return make_scheme(SchemeKind::Mha, d, h);
    if (label == "mqa") return make_scheme(SchemeKind::Mqa, d, h);
    if (label == "mkva") return make_scheme(SchemeKind::Mkva, d, h);
    if (label.rfind("gqkva-", 0) == 0) {
        const std::string rest = label.substr(6);
        const size_t dot = rest.find('.');
        if (dot == std::string::npos) {
            throw ConfigError("cannot parse scheme '" + raw +
                              "': gqkva needs two group counts, e.g. gqkva-2.3");
        }
        const int64_t gq = parse_positive_int(rest.substr(0, dot), raw);
        const int64_t gkv = parse_positive_int(rest.substr(dot + 1), raw);
        return make_scheme(SchemeKind::Gqkva, d, h, gq, gkv);
    }
    if (label.rfind("gqa-", 0) == 0) {
        return make_scheme(SchemeKind::Gqa, d, h, std::nullopt,
                           parse_positive_int(label.substr(4), raw));
    }
    if (label.rfind("gkva-", 0) == 0) {
        return make_scheme(SchemeKind::Gkva, d, h, parse_positive_int(label.substr(5), raw),
                           std::nullopt);
    }
    throw ConfigError("unknown scheme '" + raw +
                      "': expected mha | mqa | mkva | gqa-<g> | gkva-<g> | gqkva-<gq>.<gkv>");
}

std::vector<std::string> table1_scheme_labels() {
    return {"mha",   "gkva-3", "gkva-2", "mkva",      "gqa-3",
            "gqa-2", "mqa",    "gqkva-2.3", "gqkva-3.2"};
}

std::vector<std::string> expand_scheme_list(const std::string& spec) {
    const std::string lowered = to_lower(spec);
    if (lowered == "table1" || lowered == "all") return table1_scheme_labels();
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(lowered);
    while (std::getline(is, cur, ',')) {
        while (!cur.empty() && cur.front() == ' ') cur.erase(cur.begin());
        while (!cur.empty() && cur.back() == ' ') cur.pop_back();
        if (!cur.empty()) out.push_back(cur);
    }
    if (out.empty()) throw ConfigError("empty scheme list '" + spec + "'");
    return out;
}

}  // namespace gqkva
