#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <fstream>
#include <map>
#include <set>

#include "fusionscope/dataio.hpp"
#include "fusionscope/errors.hpp"
#include "support/synthetic.hpp"

using namespace fusionscope;
using testsupport::TempDir;

namespace {

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

dataio::DatasetManifest synthetic_manifest(const std::vector<std::pair<std::string, int>>& patients) {
    // patients: (patient_id, sample_count)
    dataio::DatasetManifest m;
    int i = 0;
    for (const auto& [pid, count] : patients)
        for (int s = 0; s < count; ++s) {
            dataio::SampleRecord rec;
            rec.image_path = "img_" + std::to_string(i++) + ".png";
            rec.label = i % 2;
            rec.patient_id = pid;
            m.samples.push_back(rec);
        }
    return m;
}

} // namespace

TEST_CASE("load_manifest parses rows in order") {
    TempDir dir("manifest");
    write_text(dir.file("m.csv"),
               "image_path,label,patient_id,modality,mask_path\n"
               "a.png,0,p1,T1,\n"
               "b.png,1,p1,STIR,b_mask.png\n"
               "c.png,1,p2,ULTRASOUND,\n");
    auto m = dataio::load_manifest(dir.file("m.csv"));
    REQUIRE(m.samples.size() == 3);
    CHECK(m.samples[0].image_path == "a.png");
    CHECK(m.samples[0].label == 0);
    CHECK(m.samples[1].mask_path == "b_mask.png");
    CHECK(m.samples[2].modality == dataio::Modality::Ultrasound);
}

TEST_CASE("load_manifest errors name the offending row") {
    TempDir dir("manifest_err");
    write_text(dir.file("bad_label.csv"),
               "image_path,label,patient_id,modality,mask_path\n"
               "a.png,0,p1,T1,\n"
               "b.png,2,p1,T1,\n");
    try {
        dataio::load_manifest(dir.file("bad_label.csv"));
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("row 3") != std::string::npos);
        CHECK(std::string(e.what()).find("outside {0,1}") != std::string::npos);
    }

    write_text(dir.file("dup.csv"),
               "image_path,label,patient_id,modality,mask_path\n"
               "a.png,0,p1,T1,\n"
               "a.png,1,p2,T1,\n");
    CHECK_THROWS_AS(dataio::load_manifest(dir.file("dup.csv")), ValidationError);

    CHECK_THROWS_AS(dataio::load_manifest(dir.file("missing.csv")), ValidationError);

    write_text(dir.file("short_row.csv"),
               "image_path,label,patient_id,modality,mask_path\n"
               "a.png,0,p1\n");
    CHECK_THROWS_AS(dataio::load_manifest(dir.file("short_row.csv")), ValidationError);
}

TEST_CASE("manifest at paper scale preserves counts") {
    TempDir dir("manifest_big");
    dataio::DatasetManifest m;
    for (int i = 0; i < 1371; ++i) {
        dataio::SampleRecord rec;
        rec.image_path = "scan_" + std::to_string(i) + ".png";
        rec.label = i < 584 ? 1 : 0;
        rec.patient_id = "p" + std::to_string(i / 7);
        rec.modality = i % 2 ? dataio::Modality::T1 : dataio::Modality::Stir;
        m.samples.push_back(rec);
    }
    dataio::save_manifest(m, dir.file("big.csv"));
    auto loaded = dataio::load_manifest(dir.file("big.csv"));
    REQUIRE(loaded.samples.size() == 1371);
    int affected = 0;
    for (const auto& r : loaded.samples) affected += r.label;
    CHECK(affected == 584);
    CHECK(static_cast<int>(loaded.samples.size()) - affected == 787);
}

TEST_CASE("assign_patient_folds balances and respects grouping") {
    SUBCASE("10 singleton patients into 5 folds -> 2 per fold") {
        auto m = synthetic_manifest({{"a",1},{"b",1},{"c",1},{"d",1},{"e",1},
                                     {"f",1},{"g",1},{"h",1},{"i",1},{"j",1}});
        auto folds = dataio::assign_patient_folds(m, 5, 7);
        auto lists = folds.fold_index_lists();
        for (const auto& l : lists) CHECK(l.size() == 2);
    }
    SUBCASE("heavy patient stays atomic") {
        auto m = synthetic_manifest({{"heavy",6},{"a",1},{"b",1},{"c",1},{"d",1},
                                     {"e",1},{"f",1},{"g",1},{"h",1},{"i",1}});
        auto folds = dataio::assign_patient_folds(m, 5, 3);
        std::set<int> heavy_folds;
        for (int i = 0; i < 6; ++i) heavy_folds.insert(folds.fold_of_sample[i]);
        CHECK(heavy_folds.size() == 1);
    }
    SUBCASE("deterministic under fixed seed") {
        auto m = synthetic_manifest({{"a",3},{"b",2},{"c",1},{"d",4},{"e",1},{"f",2}});
        auto f1 = dataio::assign_patient_folds(m, 3, 42);
        auto f2 = dataio::assign_patient_folds(m, 3, 42);
        CHECK(f1.fold_of_sample == f2.fold_of_sample);
        auto f3 = dataio::assign_patient_folds(m, 3, 43);
        CHECK(f1.fold_of_sample != f3.fold_of_sample); // overwhelmingly likely
    }
    SUBCASE("fewer patients than folds rejected") {
        auto m = synthetic_manifest({{"a",5},{"b",5}});
        CHECK_THROWS_AS(dataio::assign_patient_folds(m, 3, 1), ValidationError);
    }
}

TEST_CASE("patient atomicity and fold balance over random manifests") {
    nn::Rng rng(99);
    for (int trial = 0; trial < 40; ++trial) {
        int n_patients = 4 + static_cast<int>(rng.uniform_int(60));
        std::vector<std::pair<std::string, int>> patients;
        int max_count = 1;
        for (int p = 0; p < n_patients; ++p) {
            int count = 1 + static_cast<int>(rng.uniform_int(10));
            max_count = std::max(max_count, count);
            patients.push_back({"p" + std::to_string(p), count});
        }
        auto m = synthetic_manifest(patients);
        int k = 2 + static_cast<int>(rng.uniform_int(std::min(n_patients, 6) - 1));
        auto folds = dataio::assign_patient_folds(m, k, static_cast<std::int64_t>(trial));

        std::map<std::string, std::set<int>> folds_of_patient;
        for (std::size_t i = 0; i < m.samples.size(); ++i)
            folds_of_patient[m.samples[i].patient_id].insert(folds.fold_of_sample[i]);
        for (const auto& [pid, fset] : folds_of_patient) CHECK(fset.size() == 1);

        auto lists = folds.fold_index_lists();
        std::size_t lo = lists[0].size(), hi = lists[0].size();
        for (const auto& l : lists) {
            lo = std::min(lo, l.size());
            hi = std::max(hi, l.size());
        }
        CHECK(hi - lo <= static_cast<std::size_t>(max_count));
    }
}

TEST_CASE("fold JSON round trip") {
    TempDir dir("folds");
    auto m = synthetic_manifest({{"a",3},{"b",2},{"c",1},{"d",4},{"e",1}});
    auto folds = dataio::assign_patient_folds(m, 2, 11);
    dataio::save_folds_json(folds, dir.file("folds.json"));
    auto loaded = dataio::load_folds_json(dir.file("folds.json"));
    CHECK(loaded.k == folds.k);
    CHECK(loaded.seed == folds.seed);
    CHECK(loaded.fold_of_sample == folds.fold_of_sample);
}

TEST_CASE("load_image resizes a 640x512 grayscale scan to 3x224x224") {
    TempDir dir("img");
    cv::Mat scan(512, 640, CV_8UC1);
    for (int y = 0; y < 512; ++y)
        for (int x = 0; x < 640; ++x)
            scan.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>((x + y) % 256);
    cv::imwrite(dir.file("scan.png"), scan);

    auto img = dataio::load_image_file(dir.file("scan.png"));
    CHECK(img.height == 224);
    CHECK(img.width == 224);
    CHECK(img.values.size() == 3u * 224 * 224);
    // grayscale replicated across channels
    CHECK(img.at(0, 100, 100) == img.at(1, 100, 100));
    CHECK(img.at(0, 100, 100) == img.at(2, 100, 100));
    for (double v : img.values) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("constant image loads as constant tensor") {
    TempDir dir("img_const");
    cv::Mat flat(64, 80, CV_8UC1, cv::Scalar(77));
    cv::imwrite(dir.file("flat.png"), flat);
    auto img = dataio::load_image_file(dir.file("flat.png"));
    for (double v : img.values) CHECK(v == doctest::Approx(77.0 / 255.0).epsilon(1e-12));
}

TEST_CASE("224x224 RGB input is passed through exactly as original/255") {
    TempDir dir("img_exact");
    cv::Mat rgb(224, 224, CV_8UC3);
    nn::Rng rng(5);
    for (int y = 0; y < 224; ++y)
        for (int x = 0; x < 224; ++x)
            rgb.at<cv::Vec3b>(y, x) = cv::Vec3b(static_cast<std::uint8_t>(rng.uniform_int(256)),
                                                static_cast<std::uint8_t>(rng.uniform_int(256)),
                                                static_cast<std::uint8_t>(rng.uniform_int(256)));
    cv::imwrite(dir.file("rgb.png"), rgb);
    auto img = dataio::load_image_file(dir.file("rgb.png"));
    for (int y = 0; y < 224; ++y)
        for (int x = 0; x < 224; ++x) {
            auto px = rgb.at<cv::Vec3b>(y, x); // BGR
            CHECK(img.at(0, y, x) == px[2] / 255.0);
            CHECK(img.at(1, y, x) == px[1] / 255.0);
            CHECK(img.at(2, y, x) == px[0] / 255.0);
        }
}

TEST_CASE("16-bit input scales by 65535 and decode failures throw") {
    TempDir dir("img16");
    cv::Mat deep(32, 32, CV_16UC1, cv::Scalar(32768));
    cv::imwrite(dir.file("deep.png"), deep);
    auto img = dataio::load_image_file(dir.file("deep.png"), {32});
    CHECK(img.at(0, 0, 0) == doctest::Approx(32768.0 / 65535.0).epsilon(1e-12));

    write_text(dir.file("junk.png"), "not a png at all");
    CHECK_THROWS_AS(dataio::load_image_file(dir.file("junk.png")), IoError);
    CHECK_THROWS_AS(dataio::load_image_file(dir.file("absent.png")), IoError);
}

TEST_CASE("image save/load round trip stays within one quantization step") {
    TempDir dir("img_round");
    nn::Rng rng(6);
    dataio::ImageTensor img;
    img.height = 224;
    img.width = 224;
    img.values.resize(3u * 224 * 224);
    for (auto& v : img.values) v = rng.uniform();
    dataio::save_image_png(img, dir.file("round.png"));
    auto back = dataio::load_image_file(dir.file("round.png"));
    double worst = 0.0;
    for (std::size_t i = 0; i < img.values.size(); ++i)
        worst = std::max(worst, std::abs(back.values[i] - img.values[i]));
    CHECK(worst <= 0.5 / 255.0 + 1e-12);
}

TEST_CASE("load_mask thresholds and resizes nearest-neighbor") {
    TempDir dir("mask");

    SUBCASE("all background stays all zero") {
        cv::Mat zero = cv::Mat::zeros(64, 64, CV_8UC1);
        cv::imwrite(dir.file("zero.png"), zero);
        auto mask = dataio::load_mask(dir.file("zero.png"), 32, 32);
        CHECK(mask.foreground_count() == 0);
        CHECK(mask.values.size() == 32u * 32u);
    }

    SUBCASE("values {0,255} map to {0,1}") {
        cv::Mat m = cv::Mat::zeros(16, 16, CV_8UC1);
        for (int y = 4; y < 10; ++y)
            for (int x = 4; x < 10; ++x) m.at<std::uint8_t>(y, x) = 255;
        cv::imwrite(dir.file("two.png"), m);
        auto mask = dataio::load_mask(dir.file("two.png"), 16, 16);
        for (auto v : mask.values) CHECK((v == 0 || v == 1));
        CHECK(mask.foreground_count() == 36);
    }

    SUBCASE("448 -> 224 nearest neighbor picks a nearest source pixel") {
        cv::Mat m(448, 448, CV_8UC1);
        nn::Rng rng(7);
        for (int y = 0; y < 448; ++y)
            for (int x = 0; x < 448; ++x)
                m.at<std::uint8_t>(y, x) = rng.bernoulli(0.5) ? 255 : 0;
        cv::imwrite(dir.file("big.png"), m);
        auto mask = dataio::load_mask(dir.file("big.png"), 224, 224);
        for (int y = 0; y < 224; ++y)
            for (int x = 0; x < 224; ++x) {
                // center maps midway between the two candidate source pixels
                int v = mask.values[static_cast<std::size_t>(y) * 224 + x];
                bool matches = v == (m.at<std::uint8_t>(2 * y, 2 * x) / 255) ||
                               v == (m.at<std::uint8_t>(2 * y + 1, 2 * x + 1) / 255) ||
                               v == (m.at<std::uint8_t>(2 * y, 2 * x + 1) / 255) ||
                               v == (m.at<std::uint8_t>(2 * y + 1, 2 * x) / 255);
                CHECK(matches);
            }
        CHECK(mask.values.size() == 224u * 224u);
    }

    SUBCASE("decode failure") {
        write_text(dir.file("junk.png"), "garbage");
        CHECK_THROWS_AS(dataio::load_mask(dir.file("junk.png"), 8, 8), IoError);
    }
}

TEST_CASE("augment: disabled config is bit-identical") {
    nn::Rng rng(1);
    dataio::ImageTensor img;
    img.height = 8;
    img.width = 8;
    img.values.resize(3u * 64);
    for (auto& v : img.values) v = rng.uniform();
    dataio::AugmentConfig off;
    auto out = dataio::augment(img, off, rng);
    CHECK(out.values == img.values);
}

TEST_CASE("augment: forced flip reverses columns") {
    dataio::ImageTensor img;
    img.height = 2;
    img.width = 4;
    img.values.resize(3u * 8);
    for (std::size_t i = 0; i < img.values.size(); ++i) img.values[i] = static_cast<double>(i);
    dataio::AugmentConfig cfg;
    cfg.horizontal_flip = true;
    // find a seed whose first bernoulli(0.5) draw is true
    nn::Rng probe(2);
    REQUIRE(probe.bernoulli(0.5));
    nn::Rng rng(2);
    auto out = dataio::augment(img, cfg, rng);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 4; ++x) CHECK(out.at(c, y, x) == img.at(c, y, 3 - x));
}

TEST_CASE("augment: zero-degree rotation is identity") {
    nn::Rng rng(3);
    dataio::ImageTensor img;
    img.height = 6;
    img.width = 6;
    img.values.resize(3u * 36);
    for (auto& v : img.values) v = rng.uniform();
    dataio::AugmentConfig cfg;
    cfg.rotate = true;
    cfg.max_rotate_deg = 0.0;
    auto out = dataio::augment(img, cfg, rng);
    CHECK(out.values == img.values);
}

TEST_CASE("augment: deterministic given rng state, shape unchanged") {
    dataio::AugmentConfig cfg;
    cfg.horizontal_flip = true;
    cfg.rotate = true;
    cfg.intensity_jitter = true;
    nn::Rng fill(4);
    dataio::ImageTensor img;
    img.height = 12;
    img.width = 12;
    img.values.resize(3u * 144);
    for (auto& v : img.values) v = fill.uniform();

    nn::Rng r1(77), r2(77);
    auto a = dataio::augment(img, cfg, r1);
    auto b = dataio::augment(img, cfg, r2);
    CHECK(a.values == b.values);
    CHECK(a.height == img.height);
    CHECK(a.width == img.width);
    for (double v : a.values) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("blob dataset fixture is loadable end to end") {
    TempDir dir("blob");
    testsupport::BlobDatasetOptions opt;
    opt.count = 12;
    auto ds = testsupport::make_blob_dataset(dir.str(), opt);
    auto manifest = dataio::load_manifest(ds.manifest_path);
    REQUIRE(manifest.samples.size() == 12);
    dataio::LoadOptions lo;
    lo.input_size = 64;
    auto img = dataio::load_image(manifest.samples[0], lo);
    CHECK(img.height == 64);
    REQUIRE(!manifest.samples[0].mask_path.empty());
    auto mask = dataio::load_mask(manifest.samples[0].mask_path, 64, 64);
    CHECK(mask.foreground_count() > 50);
    auto batch = dataio::to_batch({img, img});
    CHECK(batch.shape() == nn::Shape({2, 3, 64, 64}));
}
