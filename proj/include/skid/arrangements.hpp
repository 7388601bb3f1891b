#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "skid/core.hpp"

namespace skid {

/// One jigsaw arrangement: perm[i] is the destination slot of source patch i.
struct Arrangement {
    std::vector<int> perm;

    bool operator==(const Arrangement&) const = default;

    bool valid() const {
        std::vector<bool> seen(perm.size(), false);
        for (int v : perm) {
            if (v < 0 || static_cast<std::size_t>(v) >= perm.size() || seen[v]) return false;
            seen[v] = true;
        }
        return true;
    }
};

inline Arrangement identity_arrangement(int n) {
    Arrangement a;
    a.perm.resize(n);
    for (int i = 0; i < n; ++i) a.perm[i] = i;
    return a;
}

inline Arrangement invert_arrangement(const Arrangement& a) {
    Arrangement inv;
    inv.perm.resize(a.perm.size());
    for (std::size_t i = 0; i < a.perm.size(); ++i)
        inv.perm[static_cast<std::size_t>(a.perm[i])] = static_cast<int>(i);
    return inv;
}

/// Pure reordering: output slot a.perm[i] holds input element i.
template <typename T>
std::vector<T> apply_arrangement(const std::vector<T>& items, const Arrangement& a) {
    if (items.size() != a.perm.size())
        throw std::invalid_argument("apply_arrangement: got " + std::to_string(items.size()) +
                                    " items for a permutation of length " +
                                    std::to_string(a.perm.size()));
    std::vector<T> out(items.size());
    for (std::size_t i = 0; i < items.size(); ++i)
        out[static_cast<std::size_t>(a.perm[i])] = items[i];
    return out;
}

/// Fixed label space for the pretext task: index in `arrangements` is the
/// class label and is stable across save/load.
struct ArrangementSet {
    int n_patches = 9;
    std::uint64_t seed = 0;
    std::vector<Arrangement> arrangements;

    int k() const { return static_cast<int>(arrangements.size()); }

    bool operator==(const ArrangementSet&) const = default;
};

namespace detail {

inline bool is_perfect_square(int n) {
    if (n <= 0) return false;
    int r = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
    return r * r == n;
}

// factorial with saturation; n! for n <= 20 fits in uint64
inline std::uint64_t factorial_capped(int n, std::uint64_t cap) {
    std::uint64_t f = 1;
    for (int i = 2; i <= n; ++i) {
        if (f > cap / static_cast<std::uint64_t>(i)) return cap;
        f *= static_cast<std::uint64_t>(i);
    }
    return f;
}

}  // namespace detail

/// Draw k distinct permutations of {0..n-1} uniformly without replacement.
/// Rejection against a set of already-drawn permutations; when k covers a
/// large share of n! we enumerate and shuffle instead.
inline ArrangementSet generate_arrangement_set(int n_patches, int k, std::uint64_t seed) {
    if (!detail::is_perfect_square(n_patches))
        throw std::invalid_argument("generate_arrangement_set: n_patches=" +
                                    std::to_string(n_patches) + " is not a perfect square");
    const std::uint64_t space = detail::factorial_capped(n_patches, UINT64_MAX);
    if (k < 1 || static_cast<std::uint64_t>(k) > space)
        throw std::invalid_argument("generate_arrangement_set: k=" + std::to_string(k) +
                                    " outside [1, " + std::to_string(n_patches) + "!]");

    ArrangementSet set;
    set.n_patches = n_patches;
    set.seed = seed;
    Rng rng(seed);

    if (space <= 40320 && static_cast<std::uint64_t>(k) * 2 >= space) {
        // small space, dense request: enumerate all permutations, shuffle, take k
        std::vector<Arrangement> all;
        Arrangement cur = identity_arrangement(n_patches);
        do {
            all.push_back(cur);
        } while (std::next_permutation(cur.perm.begin(), cur.perm.end()));
        std::shuffle(all.begin(), all.end(), rng.engine());
        all.resize(static_cast<std::size_t>(k));
        set.arrangements = std::move(all);
        return set;
    }

    std::set<std::vector<int>> seen;
    while (set.arrangements.size() < static_cast<std::size_t>(k)) {
        Arrangement a = identity_arrangement(n_patches);
        std::shuffle(a.perm.begin(), a.perm.end(), rng.engine());
        if (seen.insert(a.perm).second) set.arrangements.push_back(std::move(a));
    }
    return set;
}

/// Line-oriented text format:
///   SKIDARR v1 N=<n> K=<k> SEED=<s>
///   p0,p1,...,p{n-1}        (one line per arrangement, in label order)
inline void save_arrangement_set(const ArrangementSet& set, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_arrangement_set: cannot open " + path);
    out << "SKIDARR v1 N=" << set.n_patches << " K=" << set.k() << " SEED=" << set.seed << "\n";
    for (const auto& a : set.arrangements) {
        for (std::size_t i = 0; i < a.perm.size(); ++i) {
            out << a.perm[i];
            if (i + 1 < a.perm.size()) out << ",";
        }
        out << "\n";
    }
    if (!out) throw std::runtime_error("save_arrangement_set: write failed for " + path);
}

inline ArrangementSet load_arrangement_set(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_arrangement_set: cannot open " + path);
    std::string header;
    if (!std::getline(in, header)) throw std::runtime_error("load_arrangement_set: empty file");

    ArrangementSet set;
    int k = 0;
    {
        std::istringstream hs(header);
        std::string magic, ver, nf, kf, sf;
        hs >> magic >> ver >> nf >> kf >> sf;
        if (magic != "SKIDARR" || ver != "v1" || nf.rfind("N=", 0) != 0 ||
            kf.rfind("K=", 0) != 0 || sf.rfind("SEED=", 0) != 0)
            throw std::runtime_error("load_arrangement_set: bad header: " + header);
        set.n_patches = std::stoi(nf.substr(2));
        k = std::stoi(kf.substr(2));
        set.seed = std::stoull(sf.substr(5));
    }

    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        Arrangement a;
        std::istringstream ls(line);
        std::string tok;
        while (std::getline(ls, tok, ',')) a.perm.push_back(std::stoi(tok));
        if (static_cast<int>(a.perm.size()) != set.n_patches || !a.valid())
            throw std::runtime_error("load_arrangement_set: malformed arrangement line: " + line);
        set.arrangements.push_back(std::move(a));
    }
    if (set.k() != k)
        throw std::runtime_error("load_arrangement_set: header promises K=" + std::to_string(k) +
                                 " but file holds " + std::to_string(set.k()));
    return set;
}

}  // namespace skid
