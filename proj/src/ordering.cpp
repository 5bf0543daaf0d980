#include "aoar/ordering.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace aoar {

namespace {

void require_length(int n) {
    if (n < 1) {
        throw std::invalid_argument("permutation length must be at least 1");
    }
}

std::vector<int> seeded_shuffle(int n, std::uint64_t seed) {
    Rng rng(seed);
    return uniform_permutation(n, rng).order;
}

std::vector<int> block_pattern(const BlockwiseOrder& b, int size) {
    if (!b.pattern.empty() && size == b.block_size) {
        return b.pattern;
    }
    return seeded_shuffle(size, derive_seed(b.seed, {static_cast<std::uint64_t>(size), 0xb1ULL}));
}

}  // namespace

bool Permutation::valid() const {
    std::vector<char> seen(order.size(), 0);
    for (int v : order) {
        if (v < 0 || v >= n() || seen[static_cast<std::size_t>(v)]) {
            return false;
        }
        seen[static_cast<std::size_t>(v)] = 1;
    }
    return !order.empty();
}

bool Permutation::is_identity() const {
    for (int k = 0; k < n(); ++k) {
        if (order[static_cast<std::size_t>(k)] != k) {
            return false;
        }
    }
    return true;
}

Permutation Permutation::identity(int n) {
    require_length(n);
    Permutation p;
    p.order.resize(static_cast<std::size_t>(n));
    std::iota(p.order.begin(), p.order.end(), 0);
    return p;
}

Permutation invert(const Permutation& p) {
    if (!p.valid()) {
        throw std::invalid_argument("invert: not a permutation");
    }
    Permutation inv;
    inv.order.resize(p.order.size());
    for (int k = 0; k < p.n(); ++k) {
        inv.order[static_cast<std::size_t>(p.order[static_cast<std::size_t>(k)])] = k;
    }
    return inv;
}

Permutation uniform_permutation(int n, Rng& rng) {
    Permutation p = Permutation::identity(n);
    for (int i = n - 1; i > 0; --i) {
        std::swap(p.order[static_cast<std::size_t>(i)], p.order[static_cast<std::size_t>(rng.below(i + 1))]);
    }
    return p;
}

OrderPolicy OrderPolicy::blockwise(int block_size, std::uint64_t seed, std::vector<int> pattern) {
    OrderPolicy p{BlockwiseOrder{block_size, seed, std::move(pattern)}};
    p.validate();
    return p;
}

OrderPolicy OrderPolicy::hybrid(double identity_weight) {
    if (identity_weight <= 0.0) {
        return uniform();
    }
    if (identity_weight >= 1.0) {
        return identity();
    }
    MixtureOrder m;
    m.components.push_back({identity(), identity_weight});
    m.components.push_back({uniform(), 1.0 - identity_weight});
    return {std::move(m)};
}

void OrderPolicy::validate() const {
    if (const auto* b = std::get_if<BlockwiseOrder>(&kind)) {
        if (b->block_size < 1) {
            throw std::invalid_argument("blockwise block_size must be positive");
        }
        if (!b->pattern.empty()) {
            Permutation pat{b->pattern};
            if (pat.n() != b->block_size || !pat.valid()) {
                throw std::invalid_argument("blockwise pattern must be a permutation of the block offsets");
            }
        }
    } else if (const auto* m = std::get_if<MixtureOrder>(&kind)) {
        if (m->components.empty()) {
            throw std::invalid_argument("mixture needs at least one component");
        }
        double total = 0.0;
        for (const auto& c : m->components) {
            if (!(c.weight > 0.0)) {
                throw std::invalid_argument("mixture weights must be positive");
            }
            c.policy.validate();
            total += c.weight;
        }
        if (std::abs(total - 1.0) > 1e-9) {
            throw std::invalid_argument("mixture weights must sum to 1");
        }
    }
}

std::string OrderPolicy::describe() const {
    struct Visitor {
        std::string operator()(const IdentityOrder&) const { return "identity"; }
        std::string operator()(const UniformOrder&) const { return "uniform"; }
        std::string operator()(const FixedRandomOrder& f) const { return "fixed_random(" + std::to_string(f.seed) + ")"; }
        std::string operator()(const BlockwiseOrder& b) const {
            return "blockwise(" + std::to_string(b.block_size) + "," + std::to_string(b.seed) + ")";
        }
        std::string operator()(const MixtureOrder& m) const {
            std::ostringstream s;
            s << "mixture[";
            for (std::size_t i = 0; i < m.components.size(); ++i) {
                s << (i ? "," : "") << m.components[i].policy.describe() << ":" << m.components[i].weight;
            }
            s << "]";
            return s.str();
        }
    };
    return std::visit(Visitor{}, kind);
}

nlohmann::json OrderPolicy::to_json() const {
    struct Visitor {
        nlohmann::json operator()(const IdentityOrder&) const { return {{"kind", "identity"}}; }
        nlohmann::json operator()(const UniformOrder&) const { return {{"kind", "uniform"}}; }
        nlohmann::json operator()(const FixedRandomOrder& f) const { return {{"kind", "fixed_random"}, {"seed", f.seed}}; }
        nlohmann::json operator()(const BlockwiseOrder& b) const {
            nlohmann::json j = {{"kind", "blockwise"}, {"block_size", b.block_size}, {"seed", b.seed}};
            if (!b.pattern.empty()) {
                j["pattern"] = b.pattern;
            }
            return j;
        }
        nlohmann::json operator()(const MixtureOrder& m) const {
            nlohmann::json comps = nlohmann::json::array();
            for (const auto& c : m.components) {
                comps.push_back({{"policy", c.policy.to_json()}, {"weight", c.weight}});
            }
            return {{"kind", "mixture"}, {"components", comps}};
        }
    };
    return std::visit(Visitor{}, kind);
}

OrderPolicy OrderPolicy::from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("kind") || !j["kind"].is_string()) {
        throw std::invalid_argument("order policy must be an object with a string 'kind'");
    }
    const std::string kind = j["kind"];
    auto allow = [&](std::initializer_list<const char*> keys) {
        for (const auto& [k, v] : j.items()) {
            if (k != "kind" && std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; })) {
                throw std::invalid_argument("unknown key '" + k + "' in order policy '" + kind + "'");
            }
        }
    };
    OrderPolicy p;
    if (kind == "identity") {
        allow({});
        p = identity();
    } else if (kind == "uniform") {
        allow({});
        p = uniform();
    } else if (kind == "fixed_random") {
        allow({"seed"});
        p = fixed_random(j.value("seed", std::uint64_t{0}));
    } else if (kind == "blockwise") {
        allow({"block_size", "seed", "pattern"});
        p = {BlockwiseOrder{j.value("block_size", 4), j.value("seed", std::uint64_t{0}),
                            j.value("pattern", std::vector<int>{})}};
    } else if (kind == "hybrid") {
        allow({"identity_weight"});
        p = hybrid(j.value("identity_weight", 0.1));
    } else if (kind == "mixture") {
        allow({"components"});
        MixtureOrder m;
        for (const auto& c : j.at("components")) {
            m.components.push_back({from_json(c.at("policy")), c.at("weight").get<double>()});
        }
        p = {std::move(m)};
    } else {
        throw std::invalid_argument("unknown order policy kind '" + kind + "'");
    }
    p.validate();
    return p;
}

Permutation sample_permutation(const OrderPolicy& policy, int n, Rng& rng) {
    require_length(n);
    struct Visitor {
        int n;
        Rng& rng;
        Permutation operator()(const IdentityOrder&) const { return Permutation::identity(n); }
        Permutation operator()(const UniformOrder&) const { return uniform_permutation(n, rng); }
        Permutation operator()(const FixedRandomOrder& f) const {
            return {seeded_shuffle(n, derive_seed(f.seed, {static_cast<std::uint64_t>(n)}))};
        }
        Permutation operator()(const BlockwiseOrder& b) const {
            if (b.block_size < 1) {
                throw std::invalid_argument("blockwise block_size must be positive");
            }
            Permutation p;
            p.order.reserve(static_cast<std::size_t>(n));
            for (int start = 0; start < n; start += b.block_size) {
                const int size = std::min(b.block_size, n - start);
                for (int off : block_pattern(b, size)) {
                    p.order.push_back(start + off);
                }
            }
            return p;
        }
        Permutation operator()(const MixtureOrder& m) const {
            if (m.components.empty()) {
                throw std::invalid_argument("mixture needs at least one component");
            }
            const double u = rng.uniform();
            double acc = 0.0;
            for (const auto& c : m.components) {
                acc += c.weight;
                if (u < acc) {
                    return sample_permutation(c.policy, n, rng);
                }
            }
            return sample_permutation(m.components.back().policy, n, rng);
        }
    };
    return std::visit(Visitor{n, rng}, policy.kind);
}

BigInt factorial(int n) {
    BigInt f = 1;
    for (int i = 2; i <= n; ++i) {
        f *= i;
    }
    return f;
}

BigInt count_order_invariant(int n) {
    require_length(n);
    return BigInt(n) << (n - 1);
}

BigInt count_order_dependent(int n) {
    require_length(n);
    // C(n,k) (n-k) k! = n! / (n-k-1)!, accumulated from k = n-1 downward.
    BigInt total = 0;
    BigInt term = factorial(n);  // k = n-1
    for (int k = n - 1; k >= 0; --k) {
        total += term;
        term /= std::max(1, n - k);  // n!/(n-k)! from n!/(n-k-1)!
    }
    return total;
}

BigRational dependent_factorial_ratio(int n) { return BigRational(count_order_dependent(n), factorial(n)); }

std::uint64_t enumerate_conditionals(int n, ConditionalMode mode) {
    require_length(n);
    if (n > kEnumerationLimit) {
        throw std::invalid_argument("enumeration bound exceeded");
    }
    std::vector<int> sigma(static_cast<std::size_t>(n));
    std::iota(sigma.begin(), sigma.end(), 0);
    std::set<std::pair<int, std::uint32_t>> sets;
    std::set<std::vector<int>> sequences;
    do {
        std::uint32_t context = 0;
        for (int k = 0; k < n; ++k) {
            const int target = sigma[static_cast<std::size_t>(k)];
            if (mode == ConditionalMode::invariant) {
                sets.emplace(target, context);
            } else {
                std::vector<int> key(sigma.begin(), sigma.begin() + k + 1);
                sequences.insert(std::move(key));
            }
            context |= 1u << target;
        }
    } while (std::next_permutation(sigma.begin(), sigma.end()));
    return mode == ConditionalMode::invariant ? sets.size() : sequences.size();
}

}  // namespace aoar
