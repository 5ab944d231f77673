#include "ftfoot/gradcheck.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "ftfoot/ops.hpp"
#include "ftfoot/rng.hpp"

namespace ftfoot::diff {

namespace {

// Evaluates the (projected) scalar at the given input values.
double eval_scalar(const GradCheckFn& fn, const std::vector<Tensor>& values, const Tensor* projection) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(values.size());
  for (const Tensor& v : values) vars.push_back(tape.constant(v));
  Var out = fn(tape, vars);
  if (out.value().size() == 1) return out.value()[0];
  double acc = 0.0;
  for (int64_t i = 0; i < out.value().size(); ++i) acc += out.value()[i] * (*projection)[i];
  return acc;
}

}  // namespace

GradCheckReport grad_check(const std::string& op_name, const GradCheckFn& fn, std::vector<GradCheckInput> inputs,
                           double tolerance, uint64_t projection_seed) {
  GradCheckReport report;
  report.op_name = op_name;

  // analytic pass
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& in : inputs) vars.push_back(tape.leaf(in.value));
  Var out = fn(tape, vars);

  Tensor projection;
  Var scalar = out;
  if (out.value().size() != 1) {
    Rng rng(projection_seed);
    projection = Tensor::uniform(out.value().shape(), rng, -1.0, 1.0);
    scalar = sum_all(mul(out, tape.constant(projection)));
  }
  tape.backward(scalar);

  std::vector<Tensor> analytic;
  analytic.reserve(inputs.size());
  for (const Var& v : vars) {
    if (!v.grad().all_finite()) {
      report.passed = false;
      report.max_rel_err = std::numeric_limits<double>::infinity();
      report.message = op_name + ": non-finite gradient";
      return report;
    }
    analytic.push_back(v.grad());
  }

  // finite differences
  std::vector<Tensor> values;
  values.reserve(inputs.size());
  for (const auto& in : inputs) values.push_back(in.value);

  const Tensor* proj = projection.empty() ? nullptr : &projection;
  for (size_t ii = 0; ii < inputs.size(); ++ii) {
    GradCheckReport::PerInput per;
    per.name = inputs[ii].name;
    Tensor& x = values[ii];
    for (int64_t e = 0; e < x.size(); ++e) {
      const double x0 = x[e];
      const double h = 1e-5 * (1.0 + std::fabs(x0));
      x[e] = x0 + h;
      const double fp = eval_scalar(fn, values, proj);
      x[e] = x0 - h;
      const double fm = eval_scalar(fn, values, proj);
      x[e] = x0;
      const double fd = (fp - fm) / (2.0 * h);
      const double ad = analytic[ii][e];
      const double err = std::fabs(ad - fd) / (std::fabs(ad) + std::fabs(fd) + 1e-6);
      if (err > per.max_rel_err) {
        per.max_rel_err = err;
        per.worst_index = e;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, per.max_rel_err);
    report.inputs.push_back(std::move(per));
  }
  report.passed = report.max_rel_err <= tolerance;
  if (!report.passed) {
    std::ostringstream os;
    os << op_name << ": max relative error " << report.max_rel_err << " exceeds tolerance " << tolerance;
    report.message = os.str();
  }
  return report;
}

std::string to_string(const GradCheckReport& report) {
  std::ostringstream os;
  os << (report.passed ? "pass" : "FAIL") << " " << report.op_name << " max_rel_err=" << report.max_rel_err;
  for (const auto& in : report.inputs) os << " [" << in.name << ": " << in.max_rel_err << "]";
  if (!report.message.empty()) os << " -- " << report.message;
  return os.str();
}

}  // namespace ftfoot::diff
