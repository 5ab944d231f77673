#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ftfoot/tape.hpp"

namespace ftfoot::diff {

struct GradCheckInput {
  std::string name;
  Tensor value;
};

struct GradCheckReport {
  struct PerInput {
    std::string name;
    double max_rel_err = 0.0;
    int64_t worst_index = -1;
  };
  std::string op_name;
  std::vector<PerInput> inputs;
  double max_rel_err = 0.0;
  bool passed = false;
  std::string message;
};

// Builds the op on a fresh tape from leaf vars (one per input), reduces a
// non-scalar output to a scalar with a fixed random projection, and compares
// reverse-mode gradients against central finite differences with step
// 1e-5 * (1 + |x|). Relative error per element is |ad - fd| / (|ad| + |fd| + 1e-6).
using GradCheckFn = std::function<Var(Tape&, const std::vector<Var>&)>;

GradCheckReport grad_check(const std::string& op_name, const GradCheckFn& fn, std::vector<GradCheckInput> inputs,
                           double tolerance, uint64_t projection_seed = 1234);

std::string to_string(const GradCheckReport& report);

}  // namespace ftfoot::diff
