#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fusionscope/rng.hpp"
#include "fusionscope/tensor.hpp"

namespace fusionscope::dataio {

enum class Modality { T1, Stir, Ultrasound, Other };

Modality modality_from_string(const std::string& s);
std::string modality_to_string(Modality m);

struct SampleRecord {
    std::string image_path;
    int label = 0; // class id in {0,1}
    std::string patient_id;
    Modality modality = Modality::Other;
    std::string mask_path; // empty when absent
};

struct DatasetManifest {
    std::vector<SampleRecord> samples;
    std::vector<std::string> class_names{"class0", "class1"};

    std::size_t size() const { return samples.size(); }
};

struct FoldAssignment {
    int k = 0;
    std::int64_t seed = 0;
    std::vector<int> fold_of_sample; // one fold id in [0,k) per sample

    std::vector<std::vector<int>> fold_index_lists() const;
};

/// Model input: 3 x H x W, values in [0,1]. The reference resolution is
/// 224x224; desk-scale runs may configure a smaller square size.
struct ImageTensor {
    int height = 0;
    int width = 0;
    std::vector<double> values; // channel-major, 3*H*W

    double& at(int c, int y, int x) {
        return values[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    double at(int c, int y, int x) const {
        return values[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
};

struct BinaryMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> values; // strictly {0,1}, row-major

    std::size_t foreground_count() const;
};

constexpr int kReferenceInputSize = 224;

struct LoadOptions {
    int input_size = kReferenceInputSize;
};

struct AugmentConfig {
    bool horizontal_flip = false; // p = 0.5
    bool rotate = false;          // uniform in +-max_rotate_deg
    double max_rotate_deg = 10.0;
    bool intensity_jitter = false; // uniform scale in 1 +- jitter_fraction
    double jitter_fraction = 0.1;

    bool any() const { return horizontal_flip || rotate || intensity_jitter; }
};

/// Parses the UTF-8 CSV manifest (header image_path,label,patient_id,
/// modality,mask_path). Row order is preserved; errors carry row numbers.
DatasetManifest load_manifest(const std::string& path);

void save_manifest(const DatasetManifest& manifest, const std::string& path);

/// Deterministic patient-grouped folds: patients are shuffled by seed,
/// ordered by descending sample count (stable), then dealt round-robin.
/// All samples of a patient land in one fold.
FoldAssignment assign_patient_folds(const DatasetManifest& manifest, int k, std::int64_t seed);

void save_folds_json(const FoldAssignment& folds, const std::string& path);
FoldAssignment load_folds_json(const std::string& path);

/// Decode (PNG/JPEG/TIFF, 8- or 16-bit, grayscale or RGB), replicate
/// grayscale to 3 channels, bilinear-resize to the configured square size,
/// scale intensities to [0,1].
ImageTensor load_image(const SampleRecord& record, const LoadOptions& options = {});
ImageTensor load_image_file(const std::string& path, const LoadOptions& options = {});

/// 8-bit PNG writer (grayscale input written as RGB triplets).
void save_image_png(const ImageTensor& image, const std::string& path);

/// Decode, threshold at the midpoint of the observed intensity range,
/// nearest-neighbor resize to the target resolution.
BinaryMask load_mask(const std::string& path, int target_height, int target_width);

void save_mask_png(const BinaryMask& mask, const std::string& path);

BinaryMask resize_mask_nearest(const BinaryMask& mask, int target_height, int target_width);

/// Flip / rotate / jitter per config. Disabled config returns the input
/// bit-identically; output shape always matches the input.
ImageTensor augment(const ImageTensor& image, const AugmentConfig& config, nn::Rng& rng);

/// Stacks records into a [N,3,H,W] batch tensor.
nn::Tensor to_batch(const std::vector<ImageTensor>& images);

} // namespace fusionscope::dataio
