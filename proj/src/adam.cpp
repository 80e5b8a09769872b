#include "serann/adam.hpp"

#include <cmath>
#include <sstream>

#include "serann/error.hpp"

namespace serann {

void adam_step(const ParameterList& params, AdamState& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor->size(), 0.0);
      state.v.emplace_back(p.tensor->size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw DimensionError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                         " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = params[i].tensor->grad();
    if (state.m[i].size() != g.size()) {
      throw DimensionError("adam_step: moment shape mismatch for " + params[i].name);
    }
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!std::isfinite(g[j])) {
        std::ostringstream os;
        os << "adam_step: non-finite gradient " << g[j] << " in parameter '" << params[i].name
           << "' at index " << j << " (step " << state.step + 1 << ")";
        throw NumericError(os.str());
      }
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].tensor->values();
    const auto g = params[i].tensor->grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      w[j] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
}

}  // namespace serann
