#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "mac/data_io.hpp"
#include "mac/rng.hpp"

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("mac_dataio_" + std::to_string(mac::splitmix64(
                                           std::random_device{}())));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name, const std::string& content) const {
    const std::string p = (path / name).string();
    std::ofstream out(p);
    out << content;
    return p;
  }
  std::string at(const std::string& name) const { return (path / name).string(); }
};

mac::PredictionTensor tiny_tensor(std::size_t samples, std::size_t sub_models,
                                  std::size_t classes, const std::string& id_prefix,
                                  std::uint64_t seed) {
  mac::PredictionTensor t;
  t.num_samples = samples;
  t.num_sub_models = sub_models;
  t.num_classes = classes;
  for (std::size_t s = 0; s < samples; ++s) {
    t.sample_ids.push_back("s" + std::to_string(100 + s));
  }
  for (std::size_t m = 0; m < sub_models; ++m) {
    t.sub_model_ids.push_back(id_prefix + std::to_string(m));
  }
  for (std::size_t c = 0; c < classes; ++c) t.class_names.push_back("c" + std::to_string(c));
  mac::Rng rng(seed);
  t.values.resize(samples * sub_models * classes);
  for (auto& v : t.values) v = rng.uniform();
  return t;
}

}  // namespace

TEST_CASE("one file with one sample loads as a 1x1xC tensor", "[data_io]") {
  TempDir dir;
  const auto p = dir.file("model_a.csv", "sample_id,any,epidural\ns001,0.25,0.5\n");
  const mac::PredictionTensor t = mac::load_predictions({p});
  CHECK(t.num_samples == 1);
  CHECK(t.num_sub_models == 1);
  CHECK(t.num_classes == 2);
  CHECK(t.sub_model_ids == std::vector<std::string>{"model_a"});
  CHECK(t.class_names == std::vector<std::string>{"any", "epidural"});
  CHECK(t.sample_ids == std::vector<std::string>{"s001"});
  CHECK(t.at(0, 0, 0) == 0.25);
  CHECK(t.at(0, 0, 1) == 0.5);
}

TEST_CASE("row order within files does not matter", "[data_io]") {
  TempDir dir;
  const auto a = dir.file("a.csv", "sample_id,any\ns002,0.2\ns001,0.1\ns003,0.3\n");
  const auto b = dir.file("b.csv", "sample_id,any\ns003,0.6\ns001,0.4\ns002,0.5\n");
  const mac::PredictionTensor t = mac::load_predictions({a, b});
  CHECK(t.sample_ids == std::vector<std::string>{"s001", "s002", "s003"});
  CHECK(t.at(0, 0, 0) == 0.1);
  CHECK(t.at(1, 0, 0) == 0.2);
  CHECK(t.at(2, 0, 0) == 0.3);
  CHECK(t.at(0, 1, 0) == 0.4);
  CHECK(t.at(1, 1, 0) == 0.5);
  CHECK(t.at(2, 1, 0) == 0.6);
}

TEST_CASE("prediction load errors carry file and line context", "[data_io]") {
  TempDir dir;

  SECTION("out-of-range value cites file, line and column") {
    const auto p = dir.file(
        "bad.csv", "sample_id,any,sub\ns1,0.1,0.2\ns2,0.1,0.2\ns3,0.1,0.2\ns4,0.1,0.2\n"
                   "s5,0.1,0.2\ns6,1.3,0.2\ns7,0.1,0.2\n");
    CHECK_THROWS_MATCHES(
        mac::load_predictions({p}), mac::ParseError,
        Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("bad.csv:7") &&
                                        Catch::Matchers::ContainsSubstring("1.3") &&
                                        Catch::Matchers::ContainsSubstring("any")));
  }
  SECTION("unparsable value") {
    const auto p = dir.file("nan.csv", "sample_id,any\ns1,zero\n");
    CHECK_THROWS_MATCHES(mac::load_predictions({p}), mac::ParseError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("nan.csv:2")));
  }
  SECTION("header mismatch between files") {
    const auto a = dir.file("a.csv", "sample_id,any\ns1,0.5\n");
    const auto b = dir.file("b.csv", "sample_id,other\ns1,0.5\n");
    CHECK_THROWS_AS(mac::load_predictions({a, b}), mac::ParseError);
  }
  SECTION("missing sample in a later file") {
    const auto a = dir.file("a.csv", "sample_id,any\ns1,0.5\ns2,0.5\n");
    const auto b = dir.file("b.csv", "sample_id,any\ns1,0.5\n");
    CHECK_THROWS_MATCHES(mac::load_predictions({a, b}), mac::ParseError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("s2") &&
                             Catch::Matchers::ContainsSubstring("missing")));
  }
  SECTION("unknown sample in a later file") {
    const auto a = dir.file("a.csv", "sample_id,any\ns1,0.5\n");
    const auto b = dir.file("b.csv", "sample_id,any\ns1,0.5\ns9,0.5\n");
    CHECK_THROWS_AS(mac::load_predictions({a, b}), mac::ParseError);
  }
  SECTION("duplicate sample id") {
    const auto p = dir.file("dup.csv", "sample_id,any\ns1,0.5\ns1,0.6\n");
    CHECK_THROWS_AS(mac::load_predictions({p}), mac::ParseError);
  }
  SECTION("duplicate sub-model stems") {
    const auto a = dir.file("same.csv", "sample_id,any\ns1,0.5\n");
    fs::create_directories(dir.path / "other");
    const std::string b = (dir.path / "other" / "same.csv").string();
    std::ofstream(b) << "sample_id,any\ns1,0.5\n";
    CHECK_THROWS_AS(mac::load_predictions({a, b}), mac::ConfigError);
  }
  SECTION("bad header") {
    const auto p = dir.file("hdr.csv", "id,any\ns1,0.5\n");
    CHECK_THROWS_AS(mac::load_predictions({p}), mac::ParseError);
  }
  SECTION("no files") {
    CHECK_THROWS_AS(mac::load_predictions({}), mac::ConfigError);
  }
}

TEST_CASE("prediction save then load is a fixed point", "[data_io]") {
  TempDir dir;
  mac::PredictionTensor t = tiny_tensor(5, 3, 4, "m", 77);
  t.values[3] = 1e-7;
  t.values[4] = 0.9999999999999999;
  t.values[5] = 1.0;
  t.values[6] = 0.0;
  std::vector<std::string> paths;
  for (std::size_t m = 0; m < t.num_sub_models; ++m) {
    const std::string p = dir.at(t.sub_model_ids[m] + ".csv");
    mac::save_sub_model_csv(t, m, p);
    paths.push_back(p);
  }
  const mac::PredictionTensor back = mac::load_predictions(paths);
  CHECK(back.sample_ids == t.sample_ids);
  CHECK(back.sub_model_ids == t.sub_model_ids);
  CHECK(back.class_names == t.class_names);
  REQUIRE(back.values.size() == t.values.size());
  for (std::size_t i = 0; i < t.values.size(); ++i) CHECK(back.values[i] == t.values[i]);

  // Saving the reloaded tensor reproduces the bytes.
  const std::string again = dir.at("again.csv");
  mac::save_sub_model_csv(back, 1, again);
  std::ifstream f1(paths[1]), f2(again);
  const std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
}

TEST_CASE("append_sub_models concatenates along the sub-model axis", "[data_io]") {
  const mac::PredictionTensor a = tiny_tensor(4, 2, 3, "a", 1);
  const mac::PredictionTensor b = tiny_tensor(4, 3, 3, "b", 2);
  const mac::PredictionTensor ab = mac::append_sub_models(a, b);
  CHECK(ab.num_sub_models == 5);
  CHECK(ab.sub_model_ids == std::vector<std::string>{"a0", "a1", "b0", "b1", "b2"});
  CHECK(ab.at(2, 1, 2) == a.at(2, 1, 2));
  CHECK(ab.at(2, 3, 2) == b.at(2, 1, 2));

  SECTION("appending an empty tensor is the identity") {
    mac::PredictionTensor empty;
    const mac::PredictionTensor same = mac::append_sub_models(a, empty);
    CHECK(same.num_sub_models == a.num_sub_models);
    CHECK(same.values == a.values);
  }
  SECTION("sample mismatch is rejected") {
    mac::PredictionTensor other = tiny_tensor(4, 1, 3, "x", 3);
    other.sample_ids[1] = "zz";
    CHECK_THROWS_AS(mac::append_sub_models(a, other), mac::ShapeError);
  }
  SECTION("class mismatch is rejected") {
    const mac::PredictionTensor other = tiny_tensor(4, 1, 2, "x", 3);
    CHECK_THROWS_AS(mac::append_sub_models(a, other), mac::ShapeError);
  }
  SECTION("duplicate ids are rejected") {
    const mac::PredictionTensor dup = tiny_tensor(4, 2, 3, "a", 4);
    CHECK_THROWS_AS(mac::append_sub_models(a, dup), mac::ConfigError);
  }
}

TEST_CASE("appending 150 ids to 310 gives 460 sub-models", "[data_io]") {
  const mac::PredictionTensor first = tiny_tensor(2, 310, 1, "first_", 5);
  const mac::PredictionTensor rest = tiny_tensor(2, 150, 1, "rest_", 6);
  CHECK(mac::append_sub_models(first, rest).num_sub_models == 460);
}

TEST_CASE("select_sub_models picks columns in the requested order", "[data_io]") {
  const mac::PredictionTensor t = tiny_tensor(3, 4, 2, "m", 9);
  const mac::PredictionTensor sel = mac::select_sub_models(t, {3, 1});
  CHECK(sel.num_sub_models == 2);
  CHECK(sel.sub_model_ids == std::vector<std::string>{"m3", "m1"});
  CHECK(sel.at(2, 0, 1) == t.at(2, 3, 1));
  CHECK(sel.at(2, 1, 1) == t.at(2, 1, 1));
  CHECK_THROWS_AS(mac::select_sub_models(t, {}), mac::EmptyEnsembleError);
  CHECK_THROWS_AS(mac::select_sub_models(t, {4}), mac::ConfigError);
}

TEST_CASE("sample_slice exposes one sample as an N x C matrix", "[data_io]") {
  const mac::PredictionTensor t = tiny_tensor(3, 4, 2, "m", 13);
  const mac::Matrix slice = t.sample_slice(1);
  REQUIRE(slice.rows == 4);
  REQUIRE(slice.cols == 2);
  for (std::size_t m = 0; m < 4; ++m) {
    for (std::size_t c = 0; c < 2; ++c) CHECK(slice(m, c) == t.at(1, m, c));
  }
}

TEST_CASE("select_samples slices rows of tensors and labels", "[data_io]") {
  const mac::PredictionTensor t = tiny_tensor(5, 2, 3, "m", 21);
  const mac::PredictionTensor sel = mac::select_samples(t, {4, 1});
  CHECK(sel.num_samples == 2);
  CHECK(sel.sample_ids == std::vector<std::string>{t.sample_ids[4], t.sample_ids[1]});
  CHECK(sel.at(0, 1, 2) == t.at(4, 1, 2));
  CHECK(sel.at(1, 1, 2) == t.at(1, 1, 2));
  CHECK_THROWS_AS(mac::select_samples(t, {5}), mac::ConfigError);

  mac::LabelMatrix labels;
  labels.num_samples = 3;
  labels.num_classes = 2;
  labels.values = mac::Matrix::from_rows({{0, 1}, {1, 1}, {0, 0}});
  labels.sample_ids = {"a", "b", "c"};
  labels.class_names = {"any", "sub"};
  labels.any_index = 0;
  const mac::LabelMatrix lsel = mac::select_samples(labels, {2, 0});
  CHECK(lsel.sample_ids == std::vector<std::string>{"c", "a"});
  CHECK(lsel.values(0, 0) == 0.0);
  CHECK(lsel.values(1, 1) == 1.0);
  REQUIRE(lsel.any_index.has_value());
}

TEST_CASE("labels load sorted with any-consistency checking", "[data_io]") {
  TempDir dir;

  SECTION("consistent labels pass and sort by id") {
    const auto p = dir.file("labels.csv",
                            "sample_id,any,sub1,sub2\nb02,1,0,1\na01,0,0,0\nc03,1,1,1\n");
    const mac::LabelMatrix l = mac::load_labels(p, mac::AnyCheck::fail);
    CHECK(l.sample_ids == std::vector<std::string>{"a01", "b02", "c03"});
    REQUIRE(l.any_index.has_value());
    CHECK(*l.any_index == 0);
    CHECK(l.any_violations.empty());
    CHECK(l.values(0, 0) == 0.0);
    CHECK(l.values(1, 2) == 1.0);
  }
  SECTION("all-zero labels with an any column pass") {
    const auto p = dir.file("zeros.csv", "sample_id,any,sub1\ns1,0,0\ns2,0,0\n");
    CHECK(mac::load_labels(p, mac::AnyCheck::fail).any_violations.empty());
  }
  SECTION("sub-type positive with any zero is a violation") {
    const auto p = dir.file("viol.csv", "sample_id,any,sub1\ns1,0,1\ns2,1,1\n");
    CHECK_THROWS_MATCHES(mac::load_labels(p, mac::AnyCheck::fail), mac::DomainError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("s1")));
    const mac::LabelMatrix warned = mac::load_labels(p, mac::AnyCheck::warn);
    CHECK(warned.any_violations == std::vector<std::string>{"s1"});
  }
  SECTION("any set without a positive sub-type is also a violation") {
    const auto p = dir.file("viol2.csv", "sample_id,any,sub1\ns1,1,0\n");
    CHECK(mac::load_labels(p, mac::AnyCheck::warn).any_violations.size() == 1);
  }
  SECTION("no any column skips the check") {
    const auto p = dir.file("noany.csv", "sample_id,sub1,sub2\ns1,0,1\n");
    const mac::LabelMatrix l = mac::load_labels(p, mac::AnyCheck::fail);
    CHECK_FALSE(l.any_index.has_value());
  }
  SECTION("non-binary entries are rejected") {
    const auto p = dir.file("frac.csv", "sample_id,any\ns1,0.5\n");
    CHECK_THROWS_AS(mac::load_labels(p), mac::ParseError);
  }
  SECTION("round-trip is exact") {
    const auto p = dir.file("rt.csv", "sample_id,any,sub1\na,1,1\nb,0,0\nc,1,0\n");
    const mac::LabelMatrix l = mac::load_labels(p, mac::AnyCheck::warn);
    const std::string saved = dir.at("rt2.csv");
    mac::save_labels_csv(l, saved);
    const mac::LabelMatrix back = mac::load_labels(saved, mac::AnyCheck::warn);
    CHECK(back.sample_ids == l.sample_ids);
    CHECK(back.class_names == l.class_names);
    CHECK(back.values.data == l.values.data);
    CHECK(back.any_violations == l.any_violations);
  }
}

TEST_CASE("weights load against an expected id set", "[data_io]") {
  TempDir dir;
  const std::vector<std::string> ids = {"m0", "m1", "m2"};

  SECTION("rows may come in any order") {
    const auto p = dir.file("w.csv", "sub_model_id,weight\nm2,0.5\nm0,1.5\nm1,2\n");
    const std::vector<double> w = mac::load_weights(p, ids);
    CHECK(w == std::vector<double>{1.5, 2.0, 0.5});
  }
  SECTION("missing id is rejected") {
    const auto p = dir.file("w.csv", "sub_model_id,weight\nm0,1\nm1,1\n");
    CHECK_THROWS_MATCHES(mac::load_weights(p, ids), mac::ConfigError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("m2")));
  }
  SECTION("unknown id is rejected") {
    const auto p = dir.file("w.csv", "sub_model_id,weight\nm0,1\nm1,1\nm2,1\nmX,1\n");
    CHECK_THROWS_AS(mac::load_weights(p, ids), mac::ConfigError);
  }
  SECTION("duplicate id is rejected") {
    const auto p = dir.file("w.csv", "sub_model_id,weight\nm0,1\nm0,2\nm1,1\nm2,1\n");
    CHECK_THROWS_AS(mac::load_weights(p, ids), mac::ConfigError);
  }
  SECTION("bad header is rejected") {
    const auto p = dir.file("w.csv", "id,weight\nm0,1\n");
    CHECK_THROWS_AS(mac::load_weights(p, ids), mac::ParseError);
  }
}
