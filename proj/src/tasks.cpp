#include "fna/tasks.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include "fna/error.hpp"
#include "fna/ops.hpp"
#include "fna/random.hpp"

namespace fna {

namespace {

constexpr double kPi = std::numbers::pi;

double stripe(double y, double x, double theta, double period, double phase) {
  return std::cos(2.0 * kPi * (x * std::cos(theta) + y * std::sin(theta)) / period + phase);
}

void gen_stripes(Dataset& d, std::mt19937_64& rng) {
  const auto& s = d.spec;
  for (std::size_t n = 0; n < s.size; ++n) {
    const int c = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(s.classes)));
    const double theta = kPi * c / s.classes;
    const double period = uniform_real(rng, 4.0, 8.0);
    const double phase = uniform_real(rng, 0.0, 2.0 * kPi);
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        const double v = stripe(y, x, theta, period, phase);
        d.images.push_back(s.noise > 0 ? v + s.noise * gaussian(rng) : v);
      }
    d.labels.push_back(c);
  }
}

void gen_orient_regions(Dataset& d, std::mt19937_64& rng) {
  const auto& s = d.spec;
  const double period = 2.0 * s.context_radius;
  for (std::size_t n = 0; n < s.size; ++n) {
    const int sy = s.height / 4 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(s.height / 2 + 1)));
    const int sx = s.width / 4 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(s.width / 2 + 1)));
    int cls[4];
    double phase[4];
    for (int q = 0; q < 4; ++q) {
      cls[q] = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(s.classes)));
      phase[q] = uniform_real(rng, 0.0, 2.0 * kPi);
    }
    std::vector<int> label(d.pixels());
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        const int q = (y >= sy ? 2 : 0) + (x >= sx ? 1 : 0);
        const double v = stripe(y, x, kPi * cls[q] / s.classes, period, phase[q]);
        d.images.push_back(s.noise > 0 ? v + s.noise * gaussian(rng) : v);
        label[static_cast<std::size_t>(y) * s.width + x] = cls[q];
      }
    d.labels.insert(d.labels.end(), label.begin(), label.end());
  }
}

void gen_offset_sign(Dataset& d, std::mt19937_64& rng) {
  const auto& s = d.spec;
  for (std::size_t n = 0; n < s.size; ++n) {
    std::vector<double> clean(d.pixels());
    for (double& v : clean) v = uniform01(rng) < 0.5 ? -1.0 : 1.0;
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        const double v = clean[static_cast<std::size_t>(y) * s.width + x];
        d.images.push_back(s.noise > 0 ? v + s.noise * gaussian(rng) : v);
      }
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x)
        d.labels.push_back(clean[static_cast<std::size_t>(y) * s.width + (x + s.context_radius) % s.width] > 0 ? 1 : 0);
  }
}

void gen_constant(Dataset& d, std::mt19937_64& rng) {
  const auto& s = d.spec;
  for (std::size_t n = 0; n < s.size; ++n)
    for (std::size_t p = 0; p < d.pixels(); ++p) d.images.push_back(s.noise * gaussian(rng));
  d.labels.assign(s.size * d.pixels(), 0);
}

Dataset generate(const TaskSpec& spec) {
  validate_task_spec(spec);
  Dataset d;
  d.spec = spec;
  d.kind = family_kind(spec.family);
  d.images.reserve(spec.size * d.pixels());
  std::mt19937_64 rng(spec.seed);
  if (spec.family == "stripes") gen_stripes(d, rng);
  else if (spec.family == "orient_regions") gen_orient_regions(d, rng);
  else if (spec.family == "offset_sign") gen_offset_sign(d, rng);
  else gen_constant(d, rng);
  return d;
}

// Standard normal CDF.
double phi(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

}  // namespace

TaskKind family_kind(const std::string& family) {
  if (family == "stripes") return TaskKind::kClassification;
  if (family == "orient_regions" || family == "offset_sign" || family == "constant") return TaskKind::kDense;
  throw ConfigError("unknown task family '" + family + "'");
}

void validate_task_spec(const TaskSpec& s) {
  family_kind(s.family);
  if (s.classes < 1) throw ConfigError("task classes must be >= 1");
  if (s.family != "constant" && s.classes < 2) throw ConfigError("task family '" + s.family + "' needs >= 2 classes");
  if (s.family == "offset_sign" && s.classes != 2) throw ConfigError("offset_sign has exactly 2 classes");
  if (s.height < 4 || s.width < 4) throw ConfigError("task resolution must be at least 4x4");
  if (!(s.noise >= 0.0) || !std::isfinite(s.noise)) throw ConfigError("task noise must be finite and >= 0");
  if (s.size < 3) throw ConfigError("task size must be >= 3");
  if (s.context_radius < 1) throw ConfigError("context_radius must be >= 1");
  if (s.family == "offset_sign" && s.context_radius >= s.width) throw ConfigError("context_radius must be < width");
  if (!(s.val_fraction > 0.0 && s.test_fraction >= 0.0 && s.val_fraction + s.test_fraction < 1.0))
    throw ConfigError("split fractions must satisfy val > 0, test >= 0, val + test < 1");
}

nlohmann::ordered_json task_spec_to_json(const TaskSpec& s) {
  nlohmann::ordered_json j;
  j["family"] = s.family;
  j["classes"] = s.classes;
  j["noise"] = s.noise;
  j["height"] = s.height;
  j["width"] = s.width;
  j["size"] = s.size;
  j["seed"] = s.seed;
  j["context_radius"] = s.context_radius;
  j["val_fraction"] = s.val_fraction;
  j["test_fraction"] = s.test_fraction;
  return j;
}

TaskSpec task_spec_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("task spec must be a JSON object");
  TaskSpec s;
  try {
    for (const auto& [key, value] : doc.items()) {
      if (key == "family") s.family = value.get<std::string>();
      else if (key == "classes") s.classes = value.get<int>();
      else if (key == "noise") s.noise = value.get<double>();
      else if (key == "height") s.height = value.get<int>();
      else if (key == "width") s.width = value.get<int>();
      else if (key == "size") s.size = value.get<std::size_t>();
      else if (key == "seed") s.seed = value.get<std::uint64_t>();
      else if (key == "context_radius") s.context_radius = value.get<int>();
      else if (key == "val_fraction") s.val_fraction = value.get<double>();
      else if (key == "test_fraction") s.test_fraction = value.get<double>();
      else throw ConfigError("unknown task spec key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("task spec: ") + e.what());
  }
  validate_task_spec(s);
  return s;
}

Dataset make_seed_task(const TaskSpec& spec) {
  if (family_kind(spec.family) != TaskKind::kClassification)
    throw ConfigError("seed task needs a classification family, got '" + spec.family + "'");
  return generate(spec);
}

Dataset make_target_task(const TaskSpec& spec) {
  if (family_kind(spec.family) != TaskKind::kDense)
    throw ConfigError("target task needs a dense family, got '" + spec.family + "'");
  return generate(spec);
}

Dataset make_task(const TaskSpec& spec) { return generate(spec); }

Splits split_dataset(const Dataset& data) {
  const std::size_t n = data.size();
  const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(data.spec.val_fraction * n)));
  const auto n_test = static_cast<std::size_t>(std::llround(data.spec.test_fraction * n));
  if (n_val + n_test >= n) throw ConfigError("dataset too small for its split fractions");
  Splits s;
  const std::size_t n_train = n - n_val - n_test;
  for (std::size_t i = 0; i < n; ++i) (i < n_train ? s.train : i < n_train + n_val ? s.val : s.test).push_back(i);
  return s;
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  const std::size_t px = data.pixels(), per = data.labels_per_sample();
  std::vector<double> x;
  Batch b;
  x.reserve(indices.size() * px);
  b.labels.reserve(indices.size() * per);
  for (std::size_t i : indices) {
    if (i >= data.size()) throw ShapeError("make_batch: index " + std::to_string(i) + " out of range");
    x.insert(x.end(), data.images.begin() + static_cast<std::ptrdiff_t>(i * px),
             data.images.begin() + static_cast<std::ptrdiff_t>((i + 1) * px));
    b.labels.insert(b.labels.end(), data.labels.begin() + static_cast<std::ptrdiff_t>(i * per),
                    data.labels.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
  }
  b.x = Tensor::from({indices.size(), 1, static_cast<std::size_t>(data.spec.height),
                      static_cast<std::size_t>(data.spec.width)},
                     std::move(x));
  return b;
}

double offset_sign_accuracy_bound(const TaskSpec& spec, int radius) {
  if (spec.family != "offset_sign") throw ConfigError("accuracy bound is defined for offset_sign only");
  // The labelling pixel sits at horizontal distance r (or W - r going around).
  const int reach = std::min(spec.context_radius, spec.width - spec.context_radius);
  if (radius < reach) return 0.5;
  return spec.noise > 0 ? phi(1.0 / spec.noise) : 1.0;
}

int receptive_radius(const ArchDescriptor& arch) {
  long long rf = 1, jump = 1;
  auto visit = [&](const OpSpec& op) {
    for (const ConvUnit& u : op_conv_units(op)) {
      if (u.name == "shortcut") continue;
      rf += static_cast<long long>(u.kernel - 1) * jump;
      jump *= u.stride;
    }
  };
  visit(arch.stem);
  for (const ArchStage& st : arch.stages)
    for (const OpSpec& op : st.layers) visit(op);
  return static_cast<int>((rf - 1) / 2);
}

nlohmann::ordered_json MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["kind"] = kind == TaskKind::kDense ? "dense" : "classification";
  j["accuracy"] = accuracy;
  j["miou"] = miou;
  nlohmann::ordered_json ious = nlohmann::ordered_json::array();
  for (double v : class_iou) {
    if (std::isnan(v)) ious.push_back(nullptr);
    else ious.push_back(v);
  }
  j["class_iou"] = ious;
  j["confusion"] = confusion;
  return j;
}

MetricReport score_predictions(std::span<const int> truth, std::span<const int> prediction, int classes,
                               TaskKind kind) {
  if (truth.size() != prediction.size())
    throw ShapeError("score_predictions: " + std::to_string(truth.size()) + " labels vs " +
                     std::to_string(prediction.size()) + " predictions");
  if (truth.empty()) throw ShapeError("score_predictions: nothing to score");
  MetricReport r;
  r.kind = kind;
  r.classes = classes;
  const auto k = static_cast<std::size_t>(classes);
  r.confusion.assign(k, std::vector<long long>(k, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= classes || prediction[i] < 0 || prediction[i] >= classes)
      throw ShapeError("score_predictions: label outside [0, " + std::to_string(classes) + ")");
    ++r.confusion[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(prediction[i])];
  }
  long long diag = 0;
  double iou_sum = 0.0;
  int counted = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const long long tp = r.confusion[c][c];
    long long fp = 0, fn = 0;
    for (std::size_t o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += r.confusion[o][c];
      fn += r.confusion[c][o];
    }
    diag += tp;
    const long long denom = tp + fp + fn;
    if (denom == 0) {
      r.class_iou.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    r.class_iou.push_back(static_cast<double>(tp) / static_cast<double>(denom));
    iou_sum += r.class_iou.back();
    ++counted;
  }
  r.accuracy = static_cast<double>(diag) / static_cast<double>(truth.size());
  r.miou = counted ? iou_sum / counted : 0.0;
  return r;
}

MetricReport evaluate(const ArchDescriptor& arch, ParamMap& params, const Dataset& data,
                      std::span<const std::size_t> indices, std::size_t batch_size) {
  if (arch.head.classes != data.spec.classes)
    throw ConfigError("head has " + std::to_string(arch.head.classes) + " classes, dataset has " +
                      std::to_string(data.spec.classes));
  const bool dense = arch.head.kind == HeadKind::kDense;
  if (dense != (data.kind == TaskKind::kDense)) throw ConfigError("head kind does not match the task kind");
  std::vector<int> truth, pred;
  NoGradGuard guard;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const auto chunk = indices.subspan(start, std::min(batch_size, indices.size() - start));
    Batch b = make_batch(data, chunk);
    const auto p = argmax_classes(network_forward(arch, params, b.x, RunMode{BNMode::kEval}));
    truth.insert(truth.end(), b.labels.begin(), b.labels.end());
    pred.insert(pred.end(), p.begin(), p.end());
  }
  return score_predictions(truth, pred, data.spec.classes, data.kind);
}

namespace {

void write_pgm(const std::filesystem::path& path, int h, int w, const std::vector<unsigned char>& pixels) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write '" + path.string() + "'");
  f << "P5\n" << w << " " << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

}  // namespace

void write_image_pgm(const std::filesystem::path& path, const Dataset& data, std::size_t index) {
  if (index >= data.size()) throw ShapeError("write_image_pgm: index out of range");
  std::vector<unsigned char> px;
  for (std::size_t p = 0; p < data.pixels(); ++p) {
    const double v = std::clamp((data.images[index * data.pixels() + p] + 2.0) / 4.0, 0.0, 1.0);
    px.push_back(static_cast<unsigned char>(std::lround(v * 255.0)));
  }
  write_pgm(path, data.spec.height, data.spec.width, px);
}

void write_label_pgm(const std::filesystem::path& path, const Dataset& data, std::size_t index) {
  if (data.kind != TaskKind::kDense) throw ConfigError("write_label_pgm: classification tasks have no label map");
  if (index >= data.size()) throw ShapeError("write_label_pgm: index out of range");
  const int step = data.spec.classes > 1 ? 255 / (data.spec.classes - 1) : 0;
  std::vector<unsigned char> px;
  for (std::size_t p = 0; p < data.pixels(); ++p)
    px.push_back(static_cast<unsigned char>(data.labels[index * data.pixels() + p] * step));
  write_pgm(path, data.spec.height, data.spec.width, px);
}

}  // namespace fna
