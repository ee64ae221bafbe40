#include "support/synthetic.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <cmath>

#include "fusionscope/csv.hpp"
#include "fusionscope/rng.hpp"

namespace fs = std::filesystem;
using namespace fusionscope;

namespace testsupport {

namespace {

std::uint64_t unique_counter() {
    static std::uint64_t n = 0;
    return ++n;
}

} // namespace

TempDir::TempDir(const std::string& tag) {
    path_ = fs::temp_directory_path() /
            ("fusionscope_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(unique_counter()));
    fs::create_directories(path_);
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
}

BlobDataset make_blob_dataset(const std::string& dir, const BlobDatasetOptions& options) {
    fs::create_directories(dir);
    nn::Rng rng(options.seed);
    int n = options.count;
    int size = options.image_size;

    BlobDataset out;
    out.manifest.class_names = {"none", "blob"};
    for (int i = 0; i < n; ++i) {
        int label = i < n / 2 ? 1 : 0;
        cv::Mat img(size, size, CV_8UC1);
        cv::Mat mask = cv::Mat::zeros(size, size, CV_8UC1);

        double radius = 0.0, cy = 0.0, cx = 0.0;
        if (label == 1) {
            radius = rng.uniform(options.blob_radius_lo, options.blob_radius_hi);
            double margin = radius + 2.0;
            cy = rng.uniform(margin, size - margin);
            cx = rng.uniform(margin, size - margin);
        }
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                double v = options.background + rng.uniform(-options.noise, options.noise);
                if (label == 1) {
                    double d = std::hypot(y - cy, x - cx);
                    if (d <= radius) {
                        v = options.blob_intensity + rng.uniform(-options.noise, options.noise);
                        mask.at<std::uint8_t>(y, x) = 255;
                    }
                }
                img.at<std::uint8_t>(y, x) =
                    static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0l, 255l));
            }
        }

        std::string img_path = (fs::path(dir) / ("img" + std::to_string(i) + ".png")).string();
        cv::imwrite(img_path, img);
        std::string mask_path;
        if (label == 1) {
            mask_path = (fs::path(dir) / ("mask" + std::to_string(i) + ".png")).string();
            cv::imwrite(mask_path, mask);
        }

        dataio::SampleRecord rec;
        rec.image_path = img_path;
        rec.label = label;
        // consecutive samples share a patient; patients never straddle classes
        rec.patient_id = (label == 1 ? "pos" : "neg") + std::to_string(i / options.samples_per_patient);
        rec.modality = dataio::Modality::Other;
        rec.mask_path = mask_path;
        out.manifest.samples.push_back(std::move(rec));
    }

    out.manifest_path = (fs::path(dir) / "manifest.csv").string();
    dataio::save_manifest(out.manifest, out.manifest_path);
    return out;
}

} // namespace testsupport
