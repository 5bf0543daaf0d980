#pragma once

// Generation orders: permutations, order policies, and the counting of
// order-invariant and order-dependent conditional spaces.

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "aoar/rng.hpp"
#include "json.hpp"

namespace aoar {

using BigInt = boost::multiprecision::cpp_int;
using BigRational = boost::multiprecision::cpp_rational;

// order[k] is the original position generated at step k.
struct Permutation {
    std::vector<int> order;

    int n() const { return static_cast<int>(order.size()); }
    bool valid() const;
    bool is_identity() const;
    static Permutation identity(int n);

    bool operator==(const Permutation&) const = default;
};

// invert(p).order[p.order[k]] == k.
Permutation invert(const Permutation& p);

struct IdentityOrder {};
struct UniformOrder {};
struct FixedRandomOrder {
    std::uint64_t seed = 0;
};
// Blocks are visited left to right; inside each block positions follow one
// within-block pattern shared by all blocks of the same size. The pattern is
// drawn from `seed` unless given explicitly (pattern[i] = offset visited i-th).
// A trailing partial block uses the pattern drawn for its own size.
struct BlockwiseOrder {
    int block_size = 4;
    std::uint64_t seed = 0;
    std::vector<int> pattern;
};

struct OrderPolicy;
struct MixtureComponent;
struct MixtureOrder {
    std::vector<MixtureComponent> components;
};

struct OrderPolicy {
    std::variant<IdentityOrder, UniformOrder, FixedRandomOrder, BlockwiseOrder, MixtureOrder> kind;

    static OrderPolicy identity() { return {IdentityOrder{}}; }
    static OrderPolicy uniform() { return {UniformOrder{}}; }
    static OrderPolicy fixed_random(std::uint64_t seed) { return {FixedRandomOrder{seed}}; }
    static OrderPolicy blockwise(int block_size, std::uint64_t seed, std::vector<int> pattern = {});
    // Identity with probability identity_weight, otherwise uniform; resolved
    // independently for every training sequence.
    static OrderPolicy hybrid(double identity_weight);

    std::string describe() const;
    nlohmann::json to_json() const;
    // Throws std::invalid_argument on malformed input.
    static OrderPolicy from_json(const nlohmann::json& j);
    void validate() const;
};

struct MixtureComponent {
    OrderPolicy policy;
    double weight = 0.0;
};

// Throws std::invalid_argument when n < 1 or the policy is malformed.
Permutation sample_permutation(const OrderPolicy& policy, int n, Rng& rng);

// Unbiased Fisher-Yates draw from S_n.
Permutation uniform_permutation(int n, Rng& rng);

// Number of distinct (target, context set) pairs: n * 2^(n-1).
BigInt count_order_invariant(int n);
// Number of distinct (target, ordered context) pairs:
// sum_{k=0}^{n-1} C(n,k) (n-k) k!.
BigInt count_order_dependent(int n);
// count_order_dependent(n) / n! as an exact rational (= sum_{i<n} 1/i!).
BigRational dependent_factorial_ratio(int n);
BigInt factorial(int n);

enum class ConditionalMode { invariant, dependent };

inline constexpr int kEnumerationLimit = 8;

// Brute force: walks every permutation of S_n and every generation step,
// collecting the distinct conditionals that step evaluates. Throws
// std::invalid_argument("enumeration bound exceeded") when n > 8.
std::uint64_t enumerate_conditionals(int n, ConditionalMode mode);

}  // namespace aoar
