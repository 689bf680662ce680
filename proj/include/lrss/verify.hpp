#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lrss {

struct CheckResult {
    std::string name;
    bool pass = false;
    double max_err = 0.0;
    std::string detail;
};

// Tolerances keyed by precision profile.
struct VerifyTolerances {
    double kron_mixed_product;
    double rank1_equivalence;
    double dense_oracle;
};

inline VerifyTolerances verify_tolerances(bool f64) {
    return f64 ? VerifyTolerances{1e-12, 1e-10, 1e-12} : VerifyTolerances{1e-6, 1e-5, 1e-6};
}

CheckResult check_kron_mixed_product(bool f64, uint64_t seed);
// `inject_sign_flip` corrupts the factorized output before comparison; used
// by tests to confirm the check actually detects composition bugs.
CheckResult check_rank1_equivalence(bool f64, uint64_t seed, int trials = 50,
                                    bool inject_sign_flip = false);
CheckResult check_dense_oracle(bool f64, uint64_t seed);
CheckResult check_rope_norms(uint64_t seed);
CheckResult check_rope_shift_invariance(uint64_t seed);
CheckResult check_rope_cls_passthrough(uint64_t seed);
CheckResult check_mask_structure();
CheckResult check_hcs_ranges();
CheckResult check_flop_closed_forms();
CheckResult check_gradients(uint64_t seed);

// The full suite behind `verify`; f64 selects the tolerance profile.
std::vector<CheckResult> run_verification(bool f64, uint64_t seed);

}  // namespace lrss
