#pragma once

// On-disk formats.
//
// Binary payloads: 8-byte magic, u32 version, u64 rows, u64 cols, then the
// row-major payload; all integers and floats little-endian. Manifests are
// JSON documents carrying a "format" tag and a "version".
//
//   <dir>/dataset.manifest  features.bin  labels.bin
//   <dir>/split.manifest    exprs.train.txt  exprs.test.txt
//   <dir>/bank.manifest     bank.bin
//   <dir>/net.manifest      net.bin

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "calg/algebra.hpp"
#include "calg/datakit.hpp"
#include "calg/errors.hpp"
#include "calg/evalkit.hpp"
#include "calg/primitives.hpp"
#include "calg/training.hpp"

namespace calg {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr std::uint32_t kFormatVersion = 1;

namespace io {

using Magic = std::array<char, 8>;
inline constexpr Magic kFeatureMagic{'C', 'A', 'L', 'G', 'F', 'E', 'A', 'T'};
inline constexpr Magic kLabelMagic{'C', 'A', 'L', 'G', 'L', 'A', 'B', 'L'};
inline constexpr Magic kBankMagic{'C', 'A', 'L', 'G', 'B', 'A', 'N', 'K'};
inline constexpr Magic kNetMagic{'C', 'A', 'L', 'G', 'N', 'E', 'T', '0'};
inline constexpr std::size_t kHeaderBytes = 8 + 4 + 8 + 8;

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_le(const std::string& in, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + static_cast<std::size_t>(i)]))
         << (8 * i);
  }
  return v;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::Io, "short write to " + path.string());
}

inline std::string header(const Magic& magic, std::uint64_t rows, std::uint64_t cols) {
  std::string out(magic.begin(), magic.end());
  put_u32(out, kFormatVersion);
  put_u64(out, rows);
  put_u64(out, cols);
  return out;
}

inline std::string encode_f64(const Magic& magic, std::uint64_t rows, std::uint64_t cols,
                              std::span<const double> values) {
  std::string out = header(magic, rows, cols);
  out.reserve(out.size() + values.size() * 8);
  for (double v : values) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

struct Decoded {
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  std::size_t payload_offset = 0;
};

inline Decoded decode_header(const std::string& bytes, const Magic& magic, std::size_t elem_size,
                             const std::string& what) {
  if (bytes.size() < kHeaderBytes) {
    throw Error(ErrorCode::Format, what + ": truncated header", bytes.size());
  }
  if (!std::equal(magic.begin(), magic.end(), bytes.begin())) {
    throw Error(ErrorCode::Format, what + ": bad magic", 0);
  }
  const auto version = static_cast<std::uint32_t>(get_le(bytes, 8, 4));
  if (version != kFormatVersion) {
    throw Error(ErrorCode::VersionMismatch,
                what + ": version " + std::to_string(version) + ", expected " +
                    std::to_string(kFormatVersion));
  }
  Decoded d{get_le(bytes, 12, 8), get_le(bytes, 20, 8), kHeaderBytes};
  const std::uint64_t need = d.rows * d.cols * elem_size;
  if (bytes.size() - kHeaderBytes < need) {
    throw Error(ErrorCode::Format, what + ": truncated payload", bytes.size());
  }
  if (bytes.size() - kHeaderBytes > need) {
    throw Error(ErrorCode::Format, what + ": trailing bytes", kHeaderBytes + need);
  }
  return d;
}

inline std::vector<double> decode_f64(const std::string& bytes, const Decoded& d) {
  std::vector<double> out(d.rows * d.cols);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::bit_cast<double>(get_le(bytes, d.payload_offset + 8 * i, 8));
  }
  return out;
}

inline json read_manifest(const fs::path& path, const std::string& format) {
  const std::string text = read_file(path);
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& err) {
    throw Error(ErrorCode::Format, path.string() + ": " + err.what(), err.byte);
  }
  if (!doc.is_object() || doc.value("format", "") != format) {
    throw Error(ErrorCode::Format, path.string() + ": not a " + format + " manifest");
  }
  if (doc.value("version", 0u) != kFormatVersion) {
    throw Error(ErrorCode::VersionMismatch, path.string() + ": unsupported version");
  }
  return doc;
}

inline void write_manifest(const fs::path& path, const json& doc) {
  write_file(path, doc.dump(2) + "\n");
}

template <typename T>
T field(const json& doc, const char* key, const fs::path& where) {
  try {
    return doc.at(key).get<T>();
  } catch (const json::exception& err) {
    throw Error(ErrorCode::Format, where.string() + ": field '" + key + "': " + err.what());
  }
}

}  // namespace io

/// Refuses to continue when an artifact was produced from other data.
inline void check_digest(const std::string& expected, const std::string& actual,
                         const std::string& what, bool allow_mismatch = false) {
  if (expected.empty() || actual.empty() || expected == actual || allow_mismatch) return;
  throw Error(ErrorCode::DigestMismatch,
              what + " was built for dataset " + expected + " but dataset is " + actual);
}

// ---------------------------------------------------------------------------
// Dataset

inline void save_dataset(const fs::path& dir, const Dataset& data) {
  data.validate();
  std::string labels = io::header(io::kLabelMagic, data.size(), data.primitive_count());
  labels.append(data.labels.begin(), data.labels.end());
  io::write_file(dir / "features.bin",
                 io::encode_f64(io::kFeatureMagic, data.size(), data.dim(), data.features.span()));
  io::write_file(dir / "labels.bin", labels);
  json prov = json::parse(data.provenance.empty() ? "null" : data.provenance, nullptr, false);
  if (prov.is_discarded()) prov = data.provenance;
  io::write_manifest(dir / "dataset.manifest",
                     {{"format", "calg.dataset"},
                      {"version", kFormatVersion},
                      {"images", data.size()},
                      {"dim", data.dim()},
                      {"primitives", data.primitive_names},
                      {"digest", hex_digest(data.digest())},
                      {"provenance", prov},
                      {"features", "features.bin"},
                      {"labels", "labels.bin"}});
}

inline Dataset load_dataset(const fs::path& dir) {
  const auto mpath = dir / "dataset.manifest";
  const json doc = io::read_manifest(mpath, "calg.dataset");
  Dataset data;
  data.primitive_names = io::field<std::vector<std::string>>(doc, "primitives", mpath);
  const auto n = io::field<std::size_t>(doc, "images", mpath);
  const auto d = io::field<std::size_t>(doc, "dim", mpath);
  const auto m = data.primitive_names.size();

  const auto fbytes = io::read_file(dir / doc.value("features", "features.bin"));
  const auto fh = io::decode_header(fbytes, io::kFeatureMagic, 8, "features.bin");
  if (fh.rows != n || fh.cols != d) {
    throw Error(ErrorCode::Format, "features.bin shape disagrees with manifest");
  }
  data.features = Matrix(n, d);
  const auto values = io::decode_f64(fbytes, fh);
  std::copy(values.begin(), values.end(), data.features.data());

  const auto lbytes = io::read_file(dir / doc.value("labels", "labels.bin"));
  const auto lh = io::decode_header(lbytes, io::kLabelMagic, 1, "labels.bin");
  if (lh.rows != n || lh.cols != m) {
    throw Error(ErrorCode::Format, "labels.bin shape disagrees with manifest");
  }
  data.labels.resize(n * m);
  for (std::size_t i = 0; i < n * m; ++i) {
    const auto b = static_cast<std::uint8_t>(lbytes[lh.payload_offset + i]);
    if (b > 1) throw Error(ErrorCode::Format, "labels.bin: non-boolean byte", lh.payload_offset + i);
    data.labels[i] = b;
  }
  const json prov = doc.value("provenance", json());
  data.provenance = prov.is_string() ? prov.get<std::string>() : prov.dump();
  data.validate();
  const std::string stored = doc.value("digest", "");
  const std::string actual = hex_digest(data.digest());
  if (!stored.empty() && stored != actual) {
    throw Error(ErrorCode::DigestMismatch, "dataset content digest " + actual +
                                               " does not match manifest " + stored);
  }
  return data;
}

// ---------------------------------------------------------------------------
// Split

inline json split_config_json(const SplitConfig& c) {
  return {{"train_frac", c.train_frac},       {"val_frac", c.val_frac},
          {"min_pos_frac", c.min_pos_frac},   {"min_count", c.min_count},
          {"expr_train_ratio", c.expr_train_ratio}, {"calib_frac", c.calib_frac},
          {"prefilter_margin", c.prefilter_margin}, {"max_attempts", c.max_attempts},
          {"use_and", c.use_and},             {"use_or", c.use_or}};
}

inline SplitConfig split_config_from_json(const json& j) {
  SplitConfig c;
  c.train_frac = j.value("train_frac", c.train_frac);
  c.val_frac = j.value("val_frac", c.val_frac);
  c.min_pos_frac = j.value("min_pos_frac", c.min_pos_frac);
  c.min_count = j.value("min_count", c.min_count);
  c.expr_train_ratio = j.value("expr_train_ratio", c.expr_train_ratio);
  c.calib_frac = j.value("calib_frac", c.calib_frac);
  c.prefilter_margin = j.value("prefilter_margin", c.prefilter_margin);
  c.max_attempts = j.value("max_attempts", c.max_attempts);
  c.use_and = j.value("use_and", c.use_and);
  c.use_or = j.value("use_or", c.use_or);
  return c;
}

inline void save_split(const fs::path& dir, const SplitSpec& spec, const std::string& dataset_digest) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::Io, "cannot create " + dir.string() + ": " + ec.message());
  write_expression_list((dir / "exprs.train.txt").string(), spec.train_exprs, "training expressions");
  write_expression_list((dir / "exprs.test.txt").string(), spec.test_exprs, "test expressions");
  io::write_manifest(dir / "split.manifest",
                     {{"format", "calg.split"},
                      {"version", kFormatVersion},
                      {"dataset_digest", dataset_digest},
                      {"seed", spec.seed},
                      {"attempts", spec.attempts},
                      {"config", split_config_json(spec.config)},
                      {"train_images", spec.train_images},
                      {"val_images", spec.val_images},
                      {"test_images", spec.test_images},
                      {"train_exprs", "exprs.train.txt"},
                      {"test_exprs", "exprs.test.txt"}});
}

struct LoadedSplit {
  SplitSpec spec;
  std::string dataset_digest;
};

inline LoadedSplit load_split(const fs::path& dir) {
  const auto mpath = dir / "split.manifest";
  const json doc = io::read_manifest(mpath, "calg.split");
  LoadedSplit out;
  out.dataset_digest = doc.value("dataset_digest", "");
  out.spec.seed = doc.value("seed", std::uint64_t{0});
  out.spec.attempts = doc.value("attempts", std::size_t{0});
  out.spec.config = split_config_from_json(doc.value("config", json::object()));
  out.spec.train_images = io::field<IndexList>(doc, "train_images", mpath);
  out.spec.val_images = io::field<IndexList>(doc, "val_images", mpath);
  out.spec.test_images = io::field<IndexList>(doc, "test_images", mpath);
  out.spec.train_exprs = read_expression_list((dir / doc.value("train_exprs", "exprs.train.txt")).string());
  out.spec.test_exprs = read_expression_list((dir / doc.value("test_exprs", "exprs.test.txt")).string());
  return out;
}

/// Image indices must lie inside the dataset.
inline void check_split_against(const SplitSpec& spec, const Dataset& data) {
  for (const auto* list : {&spec.train_images, &spec.val_images, &spec.test_images}) {
    for (std::size_t i : *list) {
      if (i >= data.size()) throw Error(ErrorCode::Format, "split image index out of range");
    }
  }
}

// ---------------------------------------------------------------------------
// Primitive bank

inline void save_bank(const fs::path& dir, const PrimitiveBank& bank, const json& config = {}) {
  const std::size_t cols = bank.dim + 1;
  std::vector<double> flat;
  flat.reserve(bank.size() * cols);
  for (const auto& c : bank.classifiers) flat.insert(flat.end(), c.weights.begin(), c.weights.end());
  io::write_file(dir / "bank.bin", io::encode_f64(io::kBankMagic, bank.size(), cols, flat));
  json platt = json::array();
  for (const auto& p : bank.platt) {
    platt.push_back(p ? json{{"a", p->a}, {"b", p->b}} : json(nullptr));
  }
  io::write_manifest(dir / "bank.manifest",
                     {{"format", "calg.bank"},
                      {"version", kFormatVersion},
                      {"dim", bank.dim},
                      {"primitives", bank.names},
                      {"dataset_digest", bank.dataset_digest},
                      {"config_digest", bank.config_digest},
                      {"config", config},
                      {"platt", platt},
                      {"weights", "bank.bin"}});
}

inline PrimitiveBank load_bank(const fs::path& dir) {
  const auto mpath = dir / "bank.manifest";
  const json doc = io::read_manifest(mpath, "calg.bank");
  PrimitiveBank bank;
  const auto dim = io::field<std::size_t>(doc, "dim", mpath);
  const auto names = io::field<std::vector<std::string>>(doc, "primitives", mpath);
  const auto bytes = io::read_file(dir / doc.value("weights", "bank.bin"));
  const auto h = io::decode_header(bytes, io::kBankMagic, 8, "bank.bin");
  if (h.rows != names.size() || h.cols != dim + 1) {
    throw Error(ErrorCode::Format, "bank.bin shape disagrees with manifest");
  }
  const auto flat = io::decode_f64(bytes, h);
  bank.dim = dim;
  for (std::size_t k = 0; k < names.size(); ++k) {
    Classifier c{Vector(std::span<const double>(flat.data() + k * (dim + 1), dim + 1)),
                 ClassifierSource::SvmPrimitive};
    if (!all_finite(c.weights)) throw Error(ErrorCode::Format, "bank has non-finite weights");
    bank.add(names[k], std::move(c));
  }
  const json platt = doc.value("platt", json::array());
  for (std::size_t k = 0; k < platt.size() && k < bank.size(); ++k) {
    if (!platt[k].is_null()) {
      bank.platt[k] = PlattParams{platt[k].at("a").get<double>(), platt[k].at("b").get<double>(), 0};
    }
  }
  bank.dataset_digest = doc.value("dataset_digest", "");
  bank.config_digest = doc.value("config_digest", "");
  return bank;
}

// ---------------------------------------------------------------------------
// Composition network

struct NetMeta {
  std::uint64_t init_seed = 0;
  std::string config_digest;
  std::string dataset_digest;
  json config;
};

inline void save_net(const fs::path& dir, const NeuralAlgebra& alg, const NetMeta& meta) {
  const auto flat = alg.flatten();
  io::write_file(dir / "net.bin", io::encode_f64(io::kNetMagic, 1, flat.size(), flat));
  io::write_manifest(dir / "net.manifest",
                     {{"format", "calg.net"},
                      {"version", kFormatVersion},
                      {"dim", alg.conj.dim},
                      {"hidden", alg.conj.hidden},
                      {"slope", alg.conj.slope},
                      {"disjunction_net", alg.disj.has_value()},
                      {"unit_norm", alg.unit_norm},
                      {"parameter_order", "W1,b1,W2,b2"},
                      {"init_seed", meta.init_seed},
                      {"config_digest", meta.config_digest},
                      {"dataset_digest", meta.dataset_digest},
                      {"config", meta.config},
                      {"weights", "net.bin"}});
}

struct LoadedNet {
  NeuralAlgebra algebra;
  NetMeta meta;
};

inline LoadedNet load_net(const fs::path& dir) {
  const auto mpath = dir / "net.manifest";
  const json doc = io::read_manifest(mpath, "calg.net");
  const auto dim = io::field<std::size_t>(doc, "dim", mpath);
  const auto hidden = io::field<std::size_t>(doc, "hidden", mpath);
  const auto slope = io::field<double>(doc, "slope", mpath);
  LoadedNet out;
  out.algebra.conj = CompositionNet::zeros(dim, slope);
  if (out.algebra.conj.hidden != hidden) {
    throw Error(ErrorCode::Format, "net hidden size disagrees with dim");
  }
  if (doc.value("disjunction_net", false)) out.algebra.disj = CompositionNet::zeros(dim, slope);
  out.algebra.unit_norm = doc.value("unit_norm", false);
  const auto bytes = io::read_file(dir / doc.value("weights", "net.bin"));
  const auto h = io::decode_header(bytes, io::kNetMagic, 8, "net.bin");
  if (h.rows != 1 || h.cols != out.algebra.parameter_count()) {
    throw Error(ErrorCode::Format, "net.bin size disagrees with manifest");
  }
  out.algebra.assign(io::decode_f64(bytes, h));
  out.meta.init_seed = doc.value("init_seed", std::uint64_t{0});
  out.meta.config_digest = doc.value("config_digest", "");
  out.meta.dataset_digest = doc.value("dataset_digest", "");
  out.meta.config = doc.value("config", json::object());
  return out;
}

// ---------------------------------------------------------------------------
// Reports

inline json metrics_json(const MetricsReport& r) {
  return {{"map", r.map}, {"auc", r.auc}, {"eer", r.eer}, {"pairs", r.pairs},
          {"positives", r.positives}};
}

inline json epoch_json(const EpochRecord& rec) {
  json j{{"epoch", rec.epoch},
         {"loss", rec.mean_loss},
         {"fit", rec.terms.fit},
         {"expr_l2", rec.terms.expr_l2},
         {"param_l2", rec.terms.param_l2}};
  if (rec.validation) {
    j["val_map"] = rec.validation->map;
    j["val_auc"] = rec.validation->auc;
    j["val_eer"] = rec.validation->eer;
  }
  return j;
}

inline void write_history(const fs::path& path, const std::vector<EpochRecord>& history) {
  std::string out;
  for (const auto& rec : history) out += epoch_json(rec).dump() + "\n";
  io::write_file(path, out);
}

/// One row of an evaluation table.
struct ReportRow {
  std::string protocol;  // "simple" or "cnf"
  std::string scorer;
  std::string subset;    // e.g. "and/known", "or/unknown", "cnf"
  std::size_t complexity = 0;
  MetricsReport report;
};

inline constexpr const char* kTableColumns =
    "protocol\tscorer\tsubset\tcomplexity\tmap\tauc\teer\tpairs\tpositives";

inline std::string format_table(const std::vector<ReportRow>& rows) {
  std::ostringstream out;
  out << "# calg-metrics v" << kFormatVersion << "\n" << kTableColumns << "\n";
  out.setf(std::ios::fixed);
  out.precision(6);
  for (const auto& r : rows) {
    out << r.protocol << '\t' << r.scorer << '\t' << r.subset << '\t' << r.complexity << '\t'
        << r.report.map << '\t' << r.report.auc << '\t' << r.report.eer << '\t' << r.report.pairs
        << '\t' << r.report.positives << '\n';
  }
  return out.str();
}

inline std::string format_records(const std::vector<ReportRow>& rows) {
  std::string out;
  for (const auto& r : rows) {
    json j{{"schema", kFormatVersion}, {"protocol", r.protocol}, {"scorer", r.scorer},
           {"subset", r.subset},      {"complexity", r.complexity}};
    j.update(metrics_json(r.report));
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace calg
