#include <gtest/gtest.h>

#include <filesystem>

#include "calg/config.hpp"
#include "calg/io.hpp"

using namespace calg;

namespace {

class TempDir {
 public:
  explicit TempDir(const std::string& name)
      : path_(fs::temp_directory_path() / ("calg_test_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

Dataset tiny_dataset() {
  SyntheticConfig sc;
  sc.primitives = 4;
  sc.dim = 5;
  sc.images = 600;
  sc.blocks = 0;
  return synth_generate(sc);
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::Usage;
}

}  // namespace

TEST(Io, DatasetRoundTripIsByteIdentical) {
  TempDir a("ds_a"), b("ds_b");
  const auto d = tiny_dataset();
  save_dataset(a.path(), d);
  const auto back = load_dataset(a.path());
  EXPECT_EQ(back.features.span().size(), d.features.span().size());
  EXPECT_TRUE(std::equal(back.features.span().begin(), back.features.span().end(),
                         d.features.span().begin()));
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.primitive_names, d.primitive_names);
  EXPECT_EQ(back.digest(), d.digest());
  save_dataset(b.path(), back);
  for (const char* f : {"features.bin", "labels.bin", "dataset.manifest"}) {
    EXPECT_EQ(io::read_file(a.path() / f), io::read_file(b.path() / f)) << f;
  }
}

TEST(Io, HeaderLayout) {
  const auto bytes = io::encode_f64(io::kNetMagic, 2, 3, std::vector<double>(6, 1.0));
  ASSERT_EQ(bytes.size(), 28u + 48u);
  EXPECT_EQ(bytes.substr(0, 8), "CALGNET0");
  EXPECT_EQ(io::get_le(bytes, 8, 4), 1u);
  EXPECT_EQ(io::get_le(bytes, 12, 8), 2u);
  EXPECT_EQ(io::get_le(bytes, 20, 8), 3u);
  // 1.0 little-endian: 00 .. 00 f0 3f
  EXPECT_EQ(static_cast<unsigned char>(bytes[28 + 6]), 0xf0);
  EXPECT_EQ(static_cast<unsigned char>(bytes[28 + 7]), 0x3f);
}

TEST(Io, TruncatedFilesReportFormatErrorWithOffset) {
  TempDir t("trunc");
  const auto d = tiny_dataset();
  save_dataset(t.path(), d);
  const auto full = io::read_file(t.path() / "features.bin");
  for (std::size_t cut : {std::size_t{10}, std::size_t{27}, full.size() - 1}) {
    io::write_file(t.path() / "features.bin", full.substr(0, cut));
    try {
      load_dataset(t.path());
      FAIL() << cut;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::Format);
      ASSERT_TRUE(e.offset().has_value());
      EXPECT_EQ(*e.offset(), cut);
    }
  }
  io::write_file(t.path() / "features.bin", full + "x");
  EXPECT_EQ(code_of([&] { load_dataset(t.path()); }), ErrorCode::Format);
}

TEST(Io, WrongVersionIsRejected) {
  TempDir t("version");
  save_dataset(t.path(), tiny_dataset());
  auto bytes = io::read_file(t.path() / "labels.bin");
  bytes[8] = 2;
  io::write_file(t.path() / "labels.bin", bytes);
  EXPECT_EQ(code_of([&] { load_dataset(t.path()); }), ErrorCode::VersionMismatch);

  TempDir m("version_manifest");
  save_dataset(m.path(), tiny_dataset());
  auto doc = json::parse(io::read_file(m.path() / "dataset.manifest"));
  doc["version"] = 99;
  io::write_manifest(m.path() / "dataset.manifest", doc);
  EXPECT_EQ(code_of([&] { load_dataset(m.path()); }), ErrorCode::VersionMismatch);
}

TEST(Io, ContentDigestIsVerified) {
  TempDir t("digest");
  save_dataset(t.path(), tiny_dataset());
  auto bytes = io::read_file(t.path() / "labels.bin");
  bytes[28] = static_cast<char>(1 - bytes[28]);
  io::write_file(t.path() / "labels.bin", bytes);
  EXPECT_EQ(code_of([&] { load_dataset(t.path()); }), ErrorCode::DigestMismatch);

  EXPECT_EQ(code_of([] { check_digest("aa", "bb", "bank"); }), ErrorCode::DigestMismatch);
  EXPECT_NO_THROW(check_digest("aa", "bb", "bank", true));
  EXPECT_NO_THROW(check_digest("aa", "aa", "bank"));
}

TEST(Io, SplitRoundTrip) {
  TempDir t("split");
  const auto d = tiny_dataset();
  SplitConfig sc;
  sc.min_count = 5;
  const auto s = make_splits(d, prefilter_candidates(d, sc), sc, 2);
  save_split(t.path() / "nested", s, hex_digest(d.digest()));
  const auto back = load_split(t.path() / "nested");
  EXPECT_EQ(back.dataset_digest, hex_digest(d.digest()));
  EXPECT_EQ(back.spec.train_images, s.train_images);
  EXPECT_EQ(back.spec.test_images, s.test_images);
  EXPECT_EQ(back.spec.train_exprs, s.train_exprs);
  EXPECT_EQ(back.spec.test_exprs, s.test_exprs);
  EXPECT_EQ(back.spec.config.min_count, 5u);
  EXPECT_EQ(back.spec.calibration_images(), s.calibration_images());
}

TEST(Io, BankAndNetRoundTrip) {
  TempDir t("models");
  const auto d = tiny_dataset();
  const auto images = all_images(d);
  auto bank = train_primitive_bank(d, d.primitive_names, images, {}, 1);
  calibrate_bank(bank, d, images);
  bank.platt[2].reset();
  save_bank(t.path() / "bank", bank, {{"svm.lambda", 0.01}});
  const auto bank_back = load_bank(t.path() / "bank");
  EXPECT_EQ(bank_back, bank);
  EXPECT_EQ(bank_back.dataset_digest, bank.dataset_digest);

  auto rng = rng_stream(1, "net");
  auto alg = NeuralAlgebra::init(6, rng, 0.2, true);
  alg.unit_norm = true;
  save_net(t.path() / "net", alg, {7, "cfg", "data", {{"train.lr", 0.1}}});
  const auto net_back = load_net(t.path() / "net");
  EXPECT_EQ(net_back.algebra, alg);
  EXPECT_EQ(net_back.meta.init_seed, 7u);
  EXPECT_EQ(net_back.meta.dataset_digest, "data");

  auto bytes = io::read_file(t.path() / "net" / "net.bin");
  io::write_file(t.path() / "net" / "net.bin", bytes.substr(0, bytes.size() - 8));
  EXPECT_EQ(code_of([&] { load_net(t.path() / "net"); }), ErrorCode::Format);
}

TEST(Io, ConfigKeysRoundTripAndRejectUnknown) {
  ExperimentConfig cfg;
  apply_override(cfg, "train.lr=0.05");
  apply_override(cfg, "synth.names=a,b,c");
  apply_override(cfg, "sweep.complexities=[2,3]");
  apply_override(cfg, "run.sweep=false");
  apply_override(cfg, "pooling=per_expression");
  EXPECT_DOUBLE_EQ(cfg.train.lr, 0.05);
  EXPECT_EQ(cfg.synth.names, (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(cfg.sweep.complexities, (std::vector<std::size_t>{2, 3}));
  EXPECT_FALSE(cfg.run_sweep);
  EXPECT_EQ(cfg.pooling_mode(), Pooling::PerExpression);

  EXPECT_EQ(code_of([&] { apply_override(cfg, "train.nope=1"); }), ErrorCode::Usage);
  EXPECT_EQ(code_of([&] { apply_override(cfg, "train.lr=fast"); }), ErrorCode::Usage);
  EXPECT_EQ(code_of([&] { apply_override(cfg, "no_equals"); }), ErrorCode::Usage);

  const auto flat = to_json(cfg);
  const auto back = config_from_json(flat);
  EXPECT_EQ(to_json(back), flat);
  EXPECT_EQ(config_digest(back), config_digest(cfg));

  const auto nested = config_from_json(json{{"train", {{"epochs_main", 3}}}, {"seed", 11}});
  EXPECT_EQ(nested.train.epochs_main, 3u);
  EXPECT_EQ(nested.synth.seed, 11u);

  ExperimentConfig other = cfg;
  other.train.lr = 0.06;
  EXPECT_NE(config_digest(other, {"train."}), config_digest(cfg, {"train."}));
  EXPECT_EQ(config_digest(other, {"svm."}), config_digest(cfg, {"svm."}));
}

TEST(Io, ReportFormats) {
  const std::vector<ReportRow> rows{{"simple", "chance", "and/known", 1, {0.25, 0.5, 0.5, 100, 25}}};
  const auto table = format_table(rows);
  EXPECT_EQ(table, std::string("# calg-metrics v1\n") + kTableColumns +
                       "\nsimple\tchance\tand/known\t1\t0.250000\t0.500000\t0.500000\t100\t25\n");
  const auto rec = json::parse(format_records(rows));
  EXPECT_EQ(rec["schema"], 1);
  EXPECT_EQ(rec["auc"], 0.5);
}
