#include "fusionscope/dataio.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "fusionscope/csv.hpp"
#include "fusionscope/errors.hpp"

namespace fs = std::filesystem;

namespace fusionscope::dataio {

namespace {

const std::vector<std::string> kManifestHeader = {"image_path", "label", "patient_id",
                                                  "modality", "mask_path"};

// 2-tap bilinear with half-pixel centers, shared with the feature-map
// alignment convention.
struct LerpAxis {
    std::vector<int> i0, i1;
    std::vector<double> w1;
};

LerpAxis lerp_axis(int in, int out) {
    LerpAxis ax;
    ax.i0.resize(out);
    ax.i1.resize(out);
    ax.w1.resize(out);
    double scale = static_cast<double>(in) / out;
    for (int i = 0; i < out; ++i) {
        double src = (i + 0.5) * scale - 0.5;
        double fl = std::floor(src);
        int lo = static_cast<int>(fl);
        ax.i0[i] = std::clamp(lo, 0, in - 1);
        ax.i1[i] = std::clamp(lo + 1, 0, in - 1);
        ax.w1[i] = src - fl;
    }
    return ax;
}

std::vector<double> bilinear_plane(const std::vector<double>& src, int h, int w, int oh, int ow) {
    LerpAxis ay = lerp_axis(h, oh);
    LerpAxis ax = lerp_axis(w, ow);
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y) {
        const double* r0 = src.data() + static_cast<std::size_t>(ay.i0[y]) * w;
        const double* r1 = src.data() + static_cast<std::size_t>(ay.i1[y]) * w;
        double fy = ay.w1[y];
        for (int x = 0; x < ow; ++x) {
            double fx = ax.w1[x];
            double top = (1.0 - fx) * r0[ax.i0[x]] + fx * r0[ax.i1[x]];
            double bot = (1.0 - fx) * r1[ax.i0[x]] + fx * r1[ax.i1[x]];
            out[static_cast<std::size_t>(y) * ow + x] = (1.0 - fy) * top + fy * bot;
        }
    }
    return out;
}

} // namespace

Modality modality_from_string(const std::string& s) {
    std::string up;
    for (char c : s) up += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    if (up == "T1") return Modality::T1;
    if (up == "STIR") return Modality::Stir;
    if (up == "ULTRASOUND") return Modality::Ultrasound;
    if (up == "OTHER" || up.empty()) return Modality::Other;
    throw ValidationError("unknown modality '" + s + "'");
}

std::string modality_to_string(Modality m) {
    switch (m) {
        case Modality::T1: return "T1";
        case Modality::Stir: return "STIR";
        case Modality::Ultrasound: return "ULTRASOUND";
        case Modality::Other: return "OTHER";
    }
    return "OTHER";
}

std::vector<std::vector<int>> FoldAssignment::fold_index_lists() const {
    std::vector<std::vector<int>> lists(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < fold_of_sample.size(); ++i)
        lists[static_cast<std::size_t>(fold_of_sample[i])].push_back(static_cast<int>(i));
    return lists;
}

std::size_t BinaryMask::foreground_count() const {
    std::size_t n = 0;
    for (auto v : values) n += v ? 1 : 0;
    return n;
}

DatasetManifest load_manifest(const std::string& path) {
    if (!fs::exists(path)) throw ValidationError("manifest not found: " + path);
    auto rows = csvio::read_csv(path);
    if (rows.empty()) throw ValidationError("manifest is empty: " + path);
    if (rows[0] != kManifestHeader)
        throw ValidationError("manifest header must be image_path,label,patient_id,modality,mask_path");

    DatasetManifest manifest;
    std::map<std::string, std::size_t> seen_paths;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& row = rows[r];
        std::string where = "manifest row " + std::to_string(r + 1);
        if (row.size() != kManifestHeader.size())
            throw ValidationError(where + ": expected 5 columns, got " + std::to_string(row.size()));
        SampleRecord rec;
        rec.image_path = row[0];
        if (rec.image_path.empty()) throw ValidationError(where + ": empty image_path");
        try {
            std::size_t used = 0;
            rec.label = std::stoi(row[1], &used);
            if (used != row[1].size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw ValidationError(where + ": label '" + row[1] + "' is not an integer");
        }
        if (rec.label != 0 && rec.label != 1)
            throw ValidationError(where + ": label " + row[1] + " outside {0,1}");
        rec.patient_id = row[2];
        if (rec.patient_id.empty()) throw ValidationError(where + ": empty patient_id");
        try {
            rec.modality = modality_from_string(row[3]);
        } catch (const ValidationError& e) {
            throw ValidationError(where + ": " + e.what());
        }
        rec.mask_path = row[4];
        auto [it, inserted] = seen_paths.emplace(rec.image_path, r + 1);
        if (!inserted)
            throw ValidationError(where + ": duplicate image_path '" + rec.image_path +
                                  "' (first seen at row " + std::to_string(it->second) + ")");
        manifest.samples.push_back(std::move(rec));
    }
    if (manifest.samples.empty()) throw ValidationError("manifest has a header but no rows: " + path);
    return manifest;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
    std::vector<csvio::Row> rows;
    for (const auto& rec : manifest.samples)
        rows.push_back({rec.image_path, std::to_string(rec.label), rec.patient_id,
                        modality_to_string(rec.modality), rec.mask_path});
    csvio::write_csv(path, kManifestHeader, rows);
}

FoldAssignment assign_patient_folds(const DatasetManifest& manifest, int k, std::int64_t seed) {
    if (k < 2) throw ValidationError("assign_patient_folds: k must be >= 2");

    std::vector<std::string> patients; // first-appearance order
    std::map<std::string, int> counts;
    for (const auto& rec : manifest.samples) {
        if (!counts.count(rec.patient_id)) patients.push_back(rec.patient_id);
        counts[rec.patient_id] += 1;
    }
    if (static_cast<int>(patients.size()) < k)
        throw ValidationError("assign_patient_folds: " + std::to_string(patients.size()) +
                              " patients for k=" + std::to_string(k) + " folds");

    nn::Rng rng(static_cast<std::uint64_t>(seed));
    rng.shuffle(patients);
    std::stable_sort(patients.begin(), patients.end(),
                     [&](const std::string& a, const std::string& b) { return counts[a] > counts[b]; });

    std::map<std::string, int> fold_of_patient;
    for (std::size_t i = 0; i < patients.size(); ++i)
        fold_of_patient[patients[i]] = static_cast<int>(i % static_cast<std::size_t>(k));

    FoldAssignment out;
    out.k = k;
    out.seed = seed;
    out.fold_of_sample.reserve(manifest.samples.size());
    for (const auto& rec : manifest.samples)
        out.fold_of_sample.push_back(fold_of_patient.at(rec.patient_id));
    return out;
}

void save_folds_json(const FoldAssignment& folds, const std::string& path) {
    nlohmann::ordered_json j;
    j["k"] = folds.k;
    j["seed"] = folds.seed;
    nlohmann::ordered_json fold_map = nlohmann::ordered_json::object();
    auto lists = folds.fold_index_lists();
    for (int f = 0; f < folds.k; ++f) fold_map[std::to_string(f)] = lists[static_cast<std::size_t>(f)];
    j["folds"] = fold_map;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << j.dump(2) << '\n';
}

FoldAssignment load_folds_json(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("fold file is not valid JSON: ") + e.what());
    }
    FoldAssignment out;
    try {
        out.k = j.at("k").get<int>();
        out.seed = j.at("seed").get<std::int64_t>();
        std::map<int, std::vector<int>> lists;
        for (auto& [key, value] : j.at("folds").items())
            lists[std::stoi(key)] = value.get<std::vector<int>>();
        std::size_t total = 0;
        for (auto& [f, idx] : lists) total += idx.size();
        out.fold_of_sample.assign(total, -1);
        for (auto& [f, idx] : lists)
            for (int i : idx) {
                if (i < 0 || static_cast<std::size_t>(i) >= total || out.fold_of_sample[static_cast<std::size_t>(i)] != -1)
                    throw ValidationError("fold file: bad or duplicate sample index " + std::to_string(i));
                out.fold_of_sample[static_cast<std::size_t>(i)] = f;
            }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("fold file schema error: ") + e.what());
    }
    return out;
}

namespace {

// Decodes to a channel-major double image in [0,1] at native resolution.
ImageTensor decode_image(const std::string& path) {
    if (!fs::exists(path)) throw IoError("image not found: " + path);
    cv::Mat raw = cv::imread(path, cv::IMREAD_UNCHANGED);
    if (raw.empty()) throw IoError("cannot decode image: " + path);
    if (raw.rows < 1 || raw.cols < 1) throw IoError("zero-dimension image: " + path);

    double scale;
    if (raw.depth() == CV_8U) scale = 1.0 / 255.0;
    else if (raw.depth() == CV_16U) scale = 1.0 / 65535.0;
    else throw IoError("unsupported bit depth (want 8- or 16-bit): " + path);

    int ch = raw.channels();
    if (ch != 1 && ch != 3)
        throw IoError("unsupported channel count " + std::to_string(ch) +
                      " (want grayscale or RGB): " + path);

    ImageTensor img;
    img.height = raw.rows;
    img.width = raw.cols;
    img.values.resize(3u * raw.rows * raw.cols);
    for (int y = 0; y < raw.rows; ++y) {
        for (int x = 0; x < raw.cols; ++x) {
            double r, g, b;
            if (ch == 1) {
                double v = raw.depth() == CV_8U ? raw.at<std::uint8_t>(y, x)
                                                : raw.at<std::uint16_t>(y, x);
                r = g = b = v * scale;
            } else {
                // OpenCV decodes BGR
                if (raw.depth() == CV_8U) {
                    auto px = raw.at<cv::Vec3b>(y, x);
                    b = px[0] * scale; g = px[1] * scale; r = px[2] * scale;
                } else {
                    auto px = raw.at<cv::Vec3w>(y, x);
                    b = px[0] * scale; g = px[1] * scale; r = px[2] * scale;
                }
            }
            img.at(0, y, x) = r;
            img.at(1, y, x) = g;
            img.at(2, y, x) = b;
        }
    }
    return img;
}

} // namespace

ImageTensor load_image_file(const std::string& path, const LoadOptions& options) {
    if (options.input_size < 1) throw ValidationError("load_image: bad input size");
    ImageTensor img = decode_image(path);
    int target = options.input_size;
    if (img.height == target && img.width == target) return img;

    ImageTensor out;
    out.height = target;
    out.width = target;
    out.values.resize(3u * target * target);
    for (int c = 0; c < 3; ++c) {
        std::vector<double> plane(img.values.begin() + static_cast<std::ptrdiff_t>(c) * img.height * img.width,
                                  img.values.begin() + static_cast<std::ptrdiff_t>(c + 1) * img.height * img.width);
        auto resized = bilinear_plane(plane, img.height, img.width, target, target);
        std::copy(resized.begin(), resized.end(),
                  out.values.begin() + static_cast<std::ptrdiff_t>(c) * target * target);
    }
    return out;
}

ImageTensor load_image(const SampleRecord& record, const LoadOptions& options) {
    return load_image_file(record.image_path, options);
}

void save_image_png(const ImageTensor& image, const std::string& path) {
    cv::Mat out(image.height, image.width, CV_8UC3);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
            auto quant = [](double v) {
                return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0l, 255l));
            };
            out.at<cv::Vec3b>(y, x) =
                cv::Vec3b(quant(image.at(2, y, x)), quant(image.at(1, y, x)), quant(image.at(0, y, x)));
        }
    if (!cv::imwrite(path, out)) throw IoError("cannot write image: " + path);
}

BinaryMask resize_mask_nearest(const BinaryMask& mask, int target_height, int target_width) {
    if (mask.height == target_height && mask.width == target_width) return mask;
    BinaryMask out;
    out.height = target_height;
    out.width = target_width;
    out.values.resize(static_cast<std::size_t>(target_height) * target_width);
    double sy = static_cast<double>(mask.height) / target_height;
    double sx = static_cast<double>(mask.width) / target_width;
    for (int y = 0; y < target_height; ++y) {
        int src_y = std::min(mask.height - 1, static_cast<int>(std::floor((y + 0.5) * sy)));
        for (int x = 0; x < target_width; ++x) {
            int src_x = std::min(mask.width - 1, static_cast<int>(std::floor((x + 0.5) * sx)));
            out.values[static_cast<std::size_t>(y) * target_width + x] =
                mask.values[static_cast<std::size_t>(src_y) * mask.width + src_x];
        }
    }
    return out;
}

BinaryMask load_mask(const std::string& path, int target_height, int target_width) {
    if (!fs::exists(path)) throw IoError("mask not found: " + path);
    cv::Mat raw = cv::imread(path, cv::IMREAD_GRAYSCALE | cv::IMREAD_ANYDEPTH);
    if (raw.empty()) throw IoError("cannot decode mask: " + path);

    double lo, hi;
    cv::minMaxLoc(raw, &lo, &hi);
    BinaryMask mask;
    mask.height = raw.rows;
    mask.width = raw.cols;
    mask.values.resize(static_cast<std::size_t>(raw.rows) * raw.cols, 0);
    if (hi > lo) {
        double mid = 0.5 * (lo + hi);
        for (int y = 0; y < raw.rows; ++y)
            for (int x = 0; x < raw.cols; ++x) {
                double v = raw.depth() == CV_16U ? raw.at<std::uint16_t>(y, x)
                                                 : raw.at<std::uint8_t>(y, x);
                mask.values[static_cast<std::size_t>(y) * raw.cols + x] = v > mid ? 1 : 0;
            }
    }
    return resize_mask_nearest(mask, target_height, target_width);
}

void save_mask_png(const BinaryMask& mask, const std::string& path) {
    cv::Mat out(mask.height, mask.width, CV_8UC1);
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            out.at<std::uint8_t>(y, x) =
                mask.values[static_cast<std::size_t>(y) * mask.width + x] ? 255 : 0;
    if (!cv::imwrite(path, out)) throw IoError("cannot write mask: " + path);
}

ImageTensor augment(const ImageTensor& image, const AugmentConfig& config, nn::Rng& rng) {
    if (!config.any()) return image;
    ImageTensor out = image;
    int h = image.height, w = image.width;

    if (config.horizontal_flip && rng.bernoulli(0.5)) {
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w / 2; ++x)
                    std::swap(out.at(c, y, x), out.at(c, y, w - 1 - x));
    }

    if (config.rotate) {
        double deg = rng.uniform(-config.max_rotate_deg, config.max_rotate_deg);
        if (deg != 0.0) {
            double rad = deg * M_PI / 180.0;
            double cs = std::cos(rad), sn = std::sin(rad);
            double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
            ImageTensor rotated = out;
            for (int c = 0; c < 3; ++c) {
                for (int y = 0; y < h; ++y) {
                    for (int x = 0; x < w; ++x) {
                        // inverse rotation, clamp-to-edge bilinear sample
                        double dy = y - cy, dx = x - cx;
                        double sy = cs * dy + sn * dx + cy;
                        double sx = -sn * dy + cs * dx + cx;
                        double fy = std::floor(sy), fx = std::floor(sx);
                        int y0 = std::clamp(static_cast<int>(fy), 0, h - 1);
                        int y1 = std::clamp(static_cast<int>(fy) + 1, 0, h - 1);
                        int x0 = std::clamp(static_cast<int>(fx), 0, w - 1);
                        int x1 = std::clamp(static_cast<int>(fx) + 1, 0, w - 1);
                        double wy = sy - fy, wx = sx - fx;
                        double top = (1 - wx) * out.at(c, y0, x0) + wx * out.at(c, y0, x1);
                        double bot = (1 - wx) * out.at(c, y1, x0) + wx * out.at(c, y1, x1);
                        rotated.at(c, y, x) = (1 - wy) * top + wy * bot;
                    }
                }
            }
            out = std::move(rotated);
        }
    }

    if (config.intensity_jitter) {
        double factor = 1.0 + rng.uniform(-config.jitter_fraction, config.jitter_fraction);
        for (auto& v : out.values) v = std::clamp(v * factor, 0.0, 1.0);
    }
    return out;
}

nn::Tensor to_batch(const std::vector<ImageTensor>& images) {
    if (images.empty()) throw ValidationError("to_batch: empty batch");
    int h = images[0].height, w = images[0].width;
    nn::Tensor batch = nn::Tensor::zeros({static_cast<int>(images.size()), 3, h, w});
    double* p = batch.data();
    for (const auto& img : images) {
        if (img.height != h || img.width != w) throw ValidationError("to_batch: mixed image sizes");
        std::copy(img.values.begin(), img.values.end(), p);
        p += img.values.size();
    }
    return batch;
}

} // namespace fusionscope::dataio
