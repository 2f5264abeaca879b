#include "zdtc/dataset.hpp"

#include "zdtc/error.hpp"
#include "zdtc/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

namespace zdtc {

namespace {

constexpr std::uint64_t kFlowStream = 0x9E3779B97F4A7C15ULL;
constexpr std::uint64_t kHoldoutStream = 0xD1B54A32D192ED03ULL;

struct ClassProfile {
  int id = 0;
  Proto proto = Proto::TCP;
  std::vector<std::vector<int>> modes;
};

int draw_packet(Rng& rng, int mtu) {
  // Bimodal sizes: control/ack-sized or near-MTU payloads.
  int magnitude = 0;
  if (rng.uniform() < 0.5) {
    const int lo = 40, hi = std::max(lo, mtu / 5);
    magnitude = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
  } else {
    const int lo = (2 * mtu) / 3;
    magnitude = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(mtu - lo + 1)));
  }
  return rng.uniform() < 0.5 ? magnitude : -magnitude;
}

// Deterministic interleaving so that each protocol gets round(mix * n) of n slots.
Proto proto_for_slot(int index, double proto_mix) {
  const auto before = static_cast<long>(std::floor(index * proto_mix + 1e-12));
  const auto after = static_cast<long>(std::floor((index + 1) * proto_mix + 1e-12));
  return after > before ? Proto::TCP : Proto::UDP;
}

std::vector<ClassProfile> build_classes(const GeneratorConfig& cfg) {
  Rng rng(cfg.seed);
  std::vector<std::vector<int>> archetypes[2];
  for (Proto proto : {Proto::TCP, Proto::UDP}) {
    const int cap = series_cap(proto);
    auto& pool = archetypes[proto == Proto::TCP ? 0 : 1];
    for (int a = 0; a < 2 * cfg.archetype_count; ++a) {
      const int min_len = std::max(1, (3 * cap) / 5);
      const int len = min_len + static_cast<int>(rng.below(static_cast<std::uint64_t>(cap - min_len + 1)));
      std::vector<int> skeleton(static_cast<std::size_t>(cap), 0);
      for (int i = 0; i < len; ++i) skeleton[static_cast<std::size_t>(i)] = draw_packet(rng, cfg.mtu);
      pool.push_back(std::move(skeleton));
    }
  }

  const int total = cfg.class_count + cfg.unknown_class_count;
  std::vector<ClassProfile> classes;
  classes.reserve(static_cast<std::size_t>(total));
  for (int c = 1; c <= total; ++c) {
    ClassProfile cls;
    cls.id = c;
    const bool known = c <= cfg.class_count;
    cls.proto = proto_for_slot(known ? c - 1 : c - 1 - cfg.class_count, cfg.proto_mix);
    const auto& pool = archetypes[cls.proto == Proto::TCP ? 0 : 1];
    // The second half of the pool is reserved for novel zero-day skeletons.
    const bool novel = !known && rng.uniform() < cfg.novel_share;
    const auto half = static_cast<std::size_t>(cfg.archetype_count);
    std::vector<int> base = pool[(novel ? half : 0) + rng.below(half)];
    for (int& s : base) {
      if (s != 0 && rng.uniform() < cfg.class_divergence) s = draw_packet(rng, cfg.mtu);
    }
    for (int m = 0; m < cfg.modes_per_class; ++m) {
      std::vector<int> mode = base;
      for (int& s : mode) {
        if (s != 0 && rng.uniform() < cfg.mode_divergence) s = draw_packet(rng, cfg.mtu);
      }
      cls.modes.push_back(std::move(mode));
    }
    classes.push_back(std::move(cls));
  }
  return classes;
}

FlowRecord draw_flow(const ClassProfile& cls, int index, const GeneratorConfig& cfg, Rng& rng) {
  const auto& proto = cls.modes[rng.below(cls.modes.size())];
  FlowRecord rec;
  rec.flow_id = "c" + std::to_string(cls.id) + "-" + std::to_string(index);
  rec.proto = cls.proto;
  rec.label = cls.id;
  rec.origin_class = cls.id;

  const auto full = static_cast<std::size_t>(std::count_if(proto.begin(), proto.end(), [](int s) { return s != 0; }));
  const double keep = 1.0 - cfg.length_spread * rng.uniform();
  const auto len = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(keep * static_cast<double>(full))), 1, full);
  const auto shift = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(cfg.shift_max) + 1));

  std::vector<int> packets;
  packets.reserve(shift + len);
  for (std::size_t i = 0; i < shift; ++i) {
    const int magnitude = 40 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, cfg.mtu / 10))));
    packets.push_back(rng.uniform() < 0.5 ? magnitude : -magnitude);
  }
  for (std::size_t i = 0; i < len; ++i) {
    const double noisy = proto[i] + cfg.jitter_sigma * rng.normal();
    int s = static_cast<int>(std::lround(std::clamp(noisy, -double(cfg.mtu), double(cfg.mtu))));
    if (s == 0) s = proto[i] > 0 ? 1 : -1;
    packets.push_back(s);
  }
  rec.series.assign(proto.size(), 0);
  const std::size_t used = std::min(packets.size(), rec.series.size());
  std::copy_n(packets.begin(), used, rec.series.begin());
  rec.series_len = static_cast<int>(used);
  return rec;
}

int zipf_count(const GeneratorConfig& cfg, int rank) {
  const double raw = cfg.flows_per_class_base * std::pow(static_cast<double>(rank), -cfg.zipf_exponent);
  return std::max(cfg.min_flows_per_class, static_cast<int>(std::lround(raw)));
}

long parse_long(std::string_view field, std::size_t line, const char* what) {
  long value = 0;
  const auto* first = field.data();
  const auto* last = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || field.empty()) {
    throw DataError("flow log line " + std::to_string(line) + ": " + what + " '" +
                    std::string(field) + "' is not an integer");
  }
  return value;
}

}  // namespace

std::string_view to_string(Proto proto) { return proto == Proto::TCP ? "TCP" : "UDP"; }

Proto parse_proto(std::string_view text) {
  if (text == "TCP" || text == "tcp") return Proto::TCP;
  if (text == "UDP" || text == "udp") return Proto::UDP;
  throw DataError("unknown protocol '" + std::string(text) + "'");
}

void DatasetSplit::validate() const {
  if (known_classes < 2) throw DataError("a split needs at least two known classes");
  std::set<int> train_labels;
  for (const auto& r : train) {
    if (r.label < 1 || r.label > known_classes) {
      throw DataError("training flow " + r.flow_id + " has label " + std::to_string(r.label) +
                      " outside [1," + std::to_string(known_classes) + "]");
    }
    train_labels.insert(r.label);
  }
  for (const auto& r : test_unknown) {
    if (r.label != 0) throw DataError("zero-day flow " + r.flow_id + " must carry label 0");
    if (r.origin_class >= 1 && r.origin_class <= known_classes) {
      throw DataError("zero-day flow " + r.flow_id + " originates from a known class");
    }
  }
}

void GeneratorConfig::validate() const {
  auto fail = [](const std::string& msg) { throw UsageError("generator config: " + msg); };
  if (class_count < 2) fail("class_count must be at least 2");
  if (unknown_class_count < 1) fail("unknown_class_count must be positive");
  if (modes_per_class < 1) fail("modes_per_class must be positive");
  if (!(jitter_sigma >= 0.0)) fail("jitter_sigma must be non-negative");
  if (!(zipf_exponent >= 0.0)) fail("zipf_exponent must be non-negative");
  if (flows_per_class_base < 1) fail("flows_per_class_base must be positive");
  if (!(proto_mix >= 0.0 && proto_mix <= 1.0)) fail("proto_mix must lie in [0,1]");
  if (mtu < 64) fail("mtu must be at least 64");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) fail("test_fraction must lie in [0,1)");
  if (archetype_count < 1) fail("archetype_count must be positive");
  if (!(class_divergence >= 0.0 && class_divergence <= 1.0)) fail("class_divergence must lie in [0,1]");
  if (!(mode_divergence >= 0.0 && mode_divergence <= 1.0)) fail("mode_divergence must lie in [0,1]");
  if (!(length_spread >= 0.0 && length_spread < 1.0)) fail("length_spread must lie in [0,1)");
  if (!(novel_share >= 0.0 && novel_share <= 1.0)) fail("novel_share must lie in [0,1]");
  if (shift_max < 0) fail("shift_max must be non-negative");
  if (min_flows_per_class < 2) fail("min_flows_per_class must be at least 2");
}

Vector normalize(std::span<const int> series, int mtu) {
  Vector out(static_cast<Eigen::Index>(series.size()));
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (std::abs(series[i]) > mtu) {
      throw DataError("packet size " + std::to_string(series[i]) + " at index " + std::to_string(i) +
                      " exceeds mtu " + std::to_string(mtu));
    }
    out[static_cast<Eigen::Index>(i)] = (static_cast<double>(series[i]) / mtu + 1.0) / 2.0;
  }
  return out;
}

std::vector<int> denormalize(const Eigen::Ref<const Vector>& values, int mtu) {
  std::vector<int> out(static_cast<std::size_t>(values.size()));
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    out[static_cast<std::size_t>(i)] = static_cast<int>(std::lround((2.0 * values[i] - 1.0) * mtu));
  }
  return out;
}

Matrix feature_matrix(std::span<const FlowRecord> records, int mtu) {
  if (records.empty()) return Matrix(0, 0);
  const Proto proto = records.front().proto;
  Matrix out(static_cast<Eigen::Index>(records.size()), series_cap(proto));
  for (std::size_t r = 0; r < records.size(); ++r) {
    if (records[r].proto != proto) throw DataError("feature_matrix: mixed protocols");
    out.row(static_cast<Eigen::Index>(r)) = normalize(records[r].series, mtu).transpose();
  }
  return out;
}

std::vector<FlowRecord> read_flow_log(std::istream& in, int mtu) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("flow_id,proto,label", 0) != 0) {
    throw DataError("flow log line 1: missing header 'flow_id,proto,label,s0,...'");
  }
  std::vector<FlowRecord> records;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string_view> fields;
    std::string_view rest(line);
    for (;;) {
      const auto comma = rest.find(',');
      fields.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (fields.size() < 3) {
      throw DataError("flow log line " + std::to_string(line_no) + ": expected flow_id,proto,label,...");
    }
    FlowRecord rec;
    rec.flow_id = std::string(fields[0]);
    try {
      rec.proto = parse_proto(fields[1]);
    } catch (const DataError& e) {
      throw DataError("flow log line " + std::to_string(line_no) + ": " + e.what());
    }
    const long label = parse_long(fields[2], line_no, "label");
    if (label < 0) throw DataError("flow log line " + std::to_string(line_no) + ": negative label");
    rec.label = static_cast<int>(label);
    rec.origin_class = rec.label;
    const std::size_t cap = static_cast<std::size_t>(series_cap(rec.proto));
    const std::size_t count = fields.size() - 3;
    if (count > cap) {
      throw DataError("flow log line " + std::to_string(line_no) + ": " + std::to_string(count) +
                      " sizes exceed the " + std::string(to_string(rec.proto)) + " cap of " +
                      std::to_string(cap));
    }
    rec.series.assign(cap, 0);
    for (std::size_t i = 0; i < count; ++i) {
      const long s = parse_long(fields[3 + i], line_no, "size");
      if (std::labs(s) > mtu) {
        throw DataError("flow log line " + std::to_string(line_no) + ": size " + std::to_string(s) +
                        " at s" + std::to_string(i) + " exceeds mtu " + std::to_string(mtu));
      }
      rec.series[i] = static_cast<int>(s);
      if (s != 0) rec.series_len = static_cast<int>(i) + 1;
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<FlowRecord> load_flow_log(const std::filesystem::path& path, int mtu) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open flow log " + path.string());
  return read_flow_log(in, mtu);
}

void write_flow_log(std::ostream& out, std::span<const FlowRecord> records) {
  int width = series_cap(Proto::UDP);
  for (const auto& r : records) width = std::max(width, series_cap(r.proto));
  if (records.empty()) width = series_cap(Proto::TCP);
  out << "flow_id,proto,label";
  for (int i = 0; i < width; ++i) out << ",s" << i;
  out << '\n';
  for (const auto& r : records) {
    out << r.flow_id << ',' << to_string(r.proto) << ',' << r.label;
    for (int s : r.series) out << ',' << s;
    out << '\n';
  }
}

void save_flow_log(const std::filesystem::path& path, std::span<const FlowRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write flow log " + path.string());
  write_flow_log(out, records);
  if (!out) throw DataError("write failed for " + path.string());
}

DatasetSplit generate(const GeneratorConfig& cfg) {
  cfg.validate();
  const auto classes = build_classes(cfg);
  Rng rng(cfg.seed ^ kFlowStream);

  DatasetSplit split;
  split.known_classes = cfg.class_count;
  split.unknown_classes = cfg.unknown_class_count;
  for (const auto& cls : classes) {
    const int count = zipf_count(cfg, cls.id);
    const bool known = cls.id <= cfg.class_count;
    const int train_count =
        known ? std::clamp(static_cast<int>(std::lround(count * (1.0 - cfg.test_fraction))), 1, count) : 0;
    for (int i = 0; i < count; ++i) {
      FlowRecord rec = draw_flow(cls, i, cfg, rng);
      if (!known) {
        rec.label = 0;
        split.test_unknown.push_back(std::move(rec));
      } else if (i < train_count) {
        split.train.push_back(std::move(rec));
      } else {
        split.test_known.push_back(std::move(rec));
      }
    }
  }
  return split;
}

std::vector<FlowRecord> generate_known_holdout(const GeneratorConfig& cfg, int flows) {
  cfg.validate();
  if (flows < 1) throw UsageError("holdout size must be positive");
  const auto classes = build_classes(cfg);
  Rng rng(cfg.seed ^ kHoldoutStream);

  // Largest-remainder apportionment of `flows` by the Zipf weights.
  std::vector<double> weight(static_cast<std::size_t>(cfg.class_count));
  for (int c = 1; c <= cfg.class_count; ++c) weight[static_cast<std::size_t>(c - 1)] = zipf_count(cfg, c);
  const double total = std::accumulate(weight.begin(), weight.end(), 0.0);
  std::vector<int> counts(weight.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  int assigned = 0;
  for (std::size_t k = 0; k < weight.size(); ++k) {
    const double exact = flows * weight[k] / total;
    counts[k] = static_cast<int>(std::floor(exact));
    assigned += counts[k];
    remainders.emplace_back(exact - counts[k], k);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < flows; ++i, ++assigned) ++counts[remainders[i % remainders.size()].second];

  std::vector<FlowRecord> out;
  out.reserve(static_cast<std::size_t>(flows));
  for (int c = 1; c <= cfg.class_count; ++c) {
    for (int i = 0; i < counts[static_cast<std::size_t>(c - 1)]; ++i) {
      FlowRecord rec = draw_flow(classes[static_cast<std::size_t>(c - 1)], i, cfg, rng);
      rec.flow_id = "h" + rec.flow_id;
      out.push_back(std::move(rec));
    }
  }
  return out;
}

double openness(int known, int unknown) {
  if (known < 1 || unknown < 0) throw std::invalid_argument("openness: need K >= 1 and U >= 0");
  const double k2 = 2.0 * known;
  return 1.0 - std::sqrt(k2 / (k2 + unknown));
}

}  // namespace zdtc
