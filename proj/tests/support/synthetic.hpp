#pragma once

// Shared test fixtures: scratch directories and a synthetic "bright blob
// vs none" dataset with recorded blob masks.

#include <cstdint>
#include <filesystem>
#include <string>

#include "fusionscope/dataio.hpp"

namespace testsupport {

class TempDir {
public:
    explicit TempDir(const std::string& tag);
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::string str() const { return path_.string(); }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

struct BlobDatasetOptions {
    int count = 400; // half positive, half negative
    int image_size = 64;
    int samples_per_patient = 2;
    double blob_radius_lo = 6.0;
    double blob_radius_hi = 10.0;
    double background = 0.2;
    double blob_intensity = 0.9;
    double noise = 0.05;
    std::uint64_t seed = 1234;
};

struct BlobDataset {
    fusionscope::dataio::DatasetManifest manifest;
    std::string manifest_path;
};

/// Writes grayscale PNGs (and matching masks for positives) under `dir`
/// plus a manifest CSV. Class 1 = blob present.
BlobDataset make_blob_dataset(const std::string& dir, const BlobDatasetOptions& options = {});

} // namespace testsupport
