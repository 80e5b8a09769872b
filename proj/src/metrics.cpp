#include <cmath>
#include <numeric>

#include "serann/corpus.hpp"
#include "serann/error.hpp"

namespace serann::corpus {

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : k_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw PreconditionError("confusion matrix needs at least one class");
}

void ConfusionMatrix::add(std::size_t gold, std::size_t predicted, std::int64_t count) {
  if (gold >= k_ || predicted >= k_) throw PreconditionError("confusion matrix index out of range");
  if (count < 0) throw PreconditionError("confusion matrix counts must be non-negative");
  counts_[gold * k_ + predicted] += count;
}

std::int64_t ConfusionMatrix::support(std::size_t gold) const {
  std::int64_t s = 0;
  for (std::size_t p = 0; p < k_; ++p) s += at(gold, p);
  return s;
}

std::int64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0}); }

double uar(const ConfusionMatrix& cm, ZeroSupport policy) {
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    const std::int64_t support = cm.support(c);
    if (support == 0) {
      if (policy == ZeroSupport::kSkip) continue;
      const std::string name = cm.classes() == kNumEmotions
                                   ? std::string(to_string(emotion_from_index(static_cast<int>(c))))
                                   : "class " + std::to_string(c);
      throw DegenerateDataError("UAR undefined: " + name + " has no gold samples");
    }
    sum += static_cast<double>(cm.at(c, c)) / static_cast<double>(support);
    ++counted;
  }
  if (counted == 0) throw DegenerateDataError("UAR undefined: no class has gold samples");
  return sum / static_cast<double>(counted);
}

RunReport aggregate_runs(const std::vector<double>& uars, std::string config_digest) {
  if (uars.empty()) throw PreconditionError("aggregate_runs needs at least one value");
  RunReport r;
  r.uars = uars;
  r.config_digest = std::move(config_digest);
  const auto n = static_cast<double>(uars.size());
  r.mean = std::accumulate(uars.begin(), uars.end(), 0.0) / n;
  if (uars.size() > 1) {
    double ss = 0.0;
    for (double u : uars) ss += (u - r.mean) * (u - r.mean);
    r.stddev = std::sqrt(ss / (n - 1.0));
  }
  return r;
}

}  // namespace serann::corpus
