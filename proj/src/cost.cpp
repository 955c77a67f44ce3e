#include "fna/cost.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "fna/error.hpp"

namespace fna {

Resolution output_resolution(Resolution in, int stride) {
  if (in.height < 1 || in.width < 1) throw ConfigError("resolution must be positive");
  return {(in.height + stride - 1) / stride, (in.width + stride - 1) / stride};
}

MAdds conv_madds(Resolution out, int kernel, int in_channels, int out_channels, int groups) {
  return static_cast<MAdds>(out.height) * out.width * kernel * kernel * (in_channels / groups) * out_channels;
}

MAdds op_madds(const OpSpec& op, Resolution input) {
  const Resolution out = output_resolution(input, op.stride);
  const bool shortcut_conv = op.stride != 1 || op.in_channels != op.out_channels;
  switch (op.kind) {
    case OpKind::kIdentity: return 0;
    case OpKind::kPlainConv: return conv_madds(out, op.kernel, op.in_channels, op.out_channels, op.groups);
    case OpKind::kMBConv: {
      const int inner = op.in_channels * op.expansion;
      MAdds m = 0;
      if (op.expansion != 1) m += conv_madds(input, 1, op.in_channels, inner, 1);
      m += conv_madds(out, op.kernel, inner, inner, inner);
      m += conv_madds(out, 1, inner, op.out_channels, 1);
      return m;
    }
    case OpKind::kResBasic: {
      MAdds m = conv_madds(out, op.kernel, op.in_channels, op.out_channels, op.groups);
      m += conv_madds(out, 3, op.out_channels, op.out_channels, 1);
      if (shortcut_conv) m += conv_madds(out, 1, op.in_channels, op.out_channels, 1);
      return m;
    }
    case OpKind::kResBottleneck: {
      const int mid = op.out_channels / 4;
      MAdds m = conv_madds(input, 1, op.in_channels, mid, 1);
      m += conv_madds(out, op.kernel, mid, mid, op.groups);
      m += conv_madds(out, 1, mid, op.out_channels, 1);
      if (shortcut_conv) m += conv_madds(out, 1, op.in_channels, op.out_channels, 1);
      return m;
    }
  }
  return 0;
}

MAdds head_madds(const HeadSpec& head, int channels, Resolution features) {
  if (head.kind == HeadKind::kDense) return conv_madds(features, 1, channels, head.classes, 1);
  return static_cast<MAdds>(channels) * head.classes;
}

double expected_layer_cost(std::span<const double> costs, std::span<const double> alpha) {
  if (costs.size() != alpha.size())
    throw ShapeError("expected_layer_cost: " + std::to_string(costs.size()) + " costs vs " +
                     std::to_string(alpha.size()) + " alpha entries");
  if (costs.empty()) throw ShapeError("expected_layer_cost: empty layer");
  const double top = *std::max_element(alpha.begin(), alpha.end());
  double z = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < costs.size(); ++i) {
    const double e = std::exp(alpha[i] - top);
    z += e;
    acc += e * costs[i];
  }
  return acc / z;
}

std::vector<std::vector<Resolution>> layer_resolutions(const SearchSpace& space) {
  Resolution res = output_resolution({space.input_height, space.input_width}, space.stem.stride);
  std::vector<std::vector<Resolution>> out;
  for (const SpaceStage& st : space.stages) {
    std::vector<Resolution> row;
    for (const LayerCandidates& layer : st.layers) {
      row.push_back(res);
      res = output_resolution(res, layer.ops.front().stride);
    }
    out.push_back(std::move(row));
  }
  return out;
}

CostTable build_cost_table(const SearchSpace& space) {
  const auto res = layer_resolutions(space);
  CostTable table;
  Resolution in{space.input_height, space.input_width};
  table.fixed_cost = static_cast<double>(op_madds(space.stem, in));
  Resolution last = output_resolution(in, space.stem.stride);
  int channels = space.stem.out_channels;
  for (std::size_t s = 0; s < space.stages.size(); ++s) {
    for (std::size_t l = 0; l < space.stages[s].layers.size(); ++l) {
      const auto& ops = space.stages[s].layers[l].ops;
      if (ops.size() >= 2) {
        std::vector<double> row;
        for (const OpSpec& op : ops) row.push_back(static_cast<double>(op_madds(op, res[s][l])));
        table.layers.push_back(std::move(row));
      } else {
        table.fixed_cost += static_cast<double>(op_madds(ops.front(), res[s][l]));
      }
      last = output_resolution(res[s][l], ops.front().stride);
    }
    channels = space.stages[s].spec.out_channels;
  }
  table.fixed_cost += static_cast<double>(head_madds(space.head, channels, last));
  return table;
}

double network_cost(const CostTable& table, const std::vector<std::vector<double>>& alpha) {
  if (alpha.size() != table.layers.size())
    throw ShapeError("network_cost: alpha has " + std::to_string(alpha.size()) + " layers, table has " +
                     std::to_string(table.layers.size()));
  double total = table.fixed_cost;
  for (std::size_t i = 0; i < alpha.size(); ++i) total += expected_layer_cost(table.layers[i], alpha[i]);
  return total;
}

double path_cost(const CostTable& table, const std::vector<std::size_t>& choices) {
  if (choices.size() != table.layers.size()) throw ShapeError("path_cost: choice count mismatch");
  double total = table.fixed_cost;
  for (std::size_t i = 0; i < choices.size(); ++i) total += table.layers[i].at(choices[i]);
  return total;
}

MAdds network_cost(const ArchDescriptor& arch, Resolution input) {
  MAdds total = op_madds(arch.stem, input);
  Resolution res = output_resolution(input, arch.stem.stride);
  for (const ArchStage& st : arch.stages)
    for (const OpSpec& op : st.layers) {
      total += op_madds(op, res);
      res = output_resolution(res, op.stride);
    }
  return total + head_madds(arch.head, arch.feature_channels(), res);
}

std::string cost_report(const SearchSpace& space, const CostTable& table,
                        const std::vector<std::vector<double>>* alpha) {
  nlohmann::ordered_json doc;
  doc["fixed_madds"] = table.fixed_cost;
  const auto refs = space.searchable_layers();
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  double min_total = table.fixed_cost, max_total = table.fixed_cost;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    nlohmann::ordered_json layer;
    layer["stage"] = refs[i].stage;
    layer["layer"] = refs[i].layer;
    nlohmann::ordered_json cands = nlohmann::ordered_json::array();
    const auto& ops = space.candidates(refs[i]).ops;
    for (std::size_t c = 0; c < ops.size(); ++c) {
      nlohmann::ordered_json cand;
      cand["candidate"] = ops[c].label();
      cand["madds"] = table.layers[i][c];
      if (alpha) cand["alpha"] = (*alpha)[i][c];
      cands.push_back(std::move(cand));
    }
    layer["candidates"] = std::move(cands);
    if (alpha) layer["expected_madds"] = expected_layer_cost(table.layers[i], (*alpha)[i]);
    min_total += *std::min_element(table.layers[i].begin(), table.layers[i].end());
    max_total += *std::max_element(table.layers[i].begin(), table.layers[i].end());
    layers.push_back(std::move(layer));
  }
  doc["layers"] = std::move(layers);
  doc["min_path_madds"] = min_total;
  doc["max_path_madds"] = max_total;
  if (alpha) doc["expected_madds"] = network_cost(table, *alpha);
  return doc.dump(2) + "\n";
}

}  // namespace fna

namespace fna {

std::string arch_cost_report(const ArchDescriptor& arch, Resolution input) {
  nlohmann::ordered_json doc;
  doc["resolution"] = {input.height, input.width};
  doc["stem_madds"] = op_madds(arch.stem, input);
  Resolution res = output_resolution(input, arch.stem.stride);
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (std::size_t s = 0; s < arch.stages.size(); ++s)
    for (std::size_t l = 0; l < arch.stages[s].layers.size(); ++l) {
      const OpSpec& op = arch.stages[s].layers[l];
      nlohmann::ordered_json row;
      row["stage"] = s;
      row["layer"] = l;
      row["op"] = std::string(op_kind_name(op.kind)) + ":" + op.label();
      row["input"] = {res.height, res.width};
      row["madds"] = op_madds(op, res);
      layers.push_back(row);
      res = output_resolution(res, op.stride);
    }
  doc["layers"] = layers;
  doc["head_madds"] = head_madds(arch.head, arch.feature_channels(), res);
  doc["total_madds"] = network_cost(arch, input);
  return doc.dump(2);
}

}  // namespace fna
