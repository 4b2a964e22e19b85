#pragma once

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace ctfm {

struct CostRow {
  std::string layer;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

/// Per-layer parameter and multiply-accumulate counts for one forward pass.
///
/// Parameters are the trainable tensors (batchnorm affine included, running
/// statistics excluded). MACs cover convolutions and matrix products only;
/// activations, pooling and normalization contribute nothing. FLOPs = 2 * MACs.
class CostReport {
 public:
  void add(std::string layer, std::uint64_t params, std::uint64_t macs) {
    rows_.push_back(CostRow{std::move(layer), params, macs});
  }

  /// True the first time a parameter tensor is seen; shared weights are
  /// counted once no matter how often they run.
  bool claim(const void* tensor_id) { return claimed_.insert(tensor_id).second; }

  const std::vector<CostRow>& rows() const { return rows_; }

  std::uint64_t total_params() const {
    std::uint64_t total = 0;
    for (const auto& r : rows_) total += r.params;
    return total;
  }
  std::uint64_t total_macs() const {
    std::uint64_t total = 0;
    for (const auto& r : rows_) total += r.macs;
    return total;
  }
  double params_m() const { return static_cast<double>(total_params()) / 1e6; }
  double gflops() const { return 2.0 * static_cast<double>(total_macs()) / 1e9; }

  std::string to_csv() const {
    std::ostringstream out;
    out << "layer,params,macs\n";
    for (const auto& r : rows_) out << r.layer << ',' << r.params << ',' << r.macs << '\n';
    return out.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : rows_) rows.push_back({{"layer", r.layer}, {"params", r.params}, {"macs", r.macs}});
    return {{"flops_convention", "FLOPs = 2 * MACs; conv and matmul MACs only"},
            {"rows", rows},
            {"total_params", total_params()},
            {"total_macs", total_macs()},
            {"gflops", gflops()}};
  }

 private:
  std::vector<CostRow> rows_;
  std::unordered_set<const void*> claimed_;
};

}  // namespace ctfm
