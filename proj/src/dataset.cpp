#include "lesa/dataset.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lesa/serialize.hpp"

namespace lesa {

Dataset Dataset::slice(int64_t begin, int64_t end) const {
    if (begin < 0 || end > count || begin > end) throw Error("dataset slice out of range");
    Dataset out;
    out.count = end - begin;
    out.channels = channels;
    out.height = height;
    out.width = width;
    out.images.assign(images.begin() + begin * sample_size(), images.begin() + end * sample_size());
    out.labels.assign(labels.begin() + begin, labels.begin() + end);
    return out;
}

Dataset generate_synthetic(int classes, int count, int size, uint64_t seed) {
    if (classes < 2) throw ConfigError("synthetic data: need at least 2 classes");
    if (count < 1) throw ConfigError("synthetic data: count must be positive");
    if (size < 16) throw ConfigError("synthetic data: size must be >= 16");
    Dataset ds;
    ds.count = count;
    ds.channels = 3;
    ds.height = size;
    ds.width = size;
    ds.images.resize(static_cast<size_t>(count) * ds.sample_size());
    ds.labels.resize(static_cast<size_t>(count));
    Rng rng(seed);
    const double inv = 1.0 / static_cast<double>(size - 1);
    for (int64_t n = 0; n < count; ++n) {
        const int c = static_cast<int>(n % classes);
        ds.labels[static_cast<size_t>(n)] = c;
        const double theta = M_PI * c / classes;             // bar orientation (texture)
        const double freq = 5.0 + 3.0 * (c % 3);             // bar frequency (texture)
        const double phi = 2.0 * M_PI * c / classes;         // layout wave orientation
        const int quad = c % 4;                              // emphasized quadrant (layout)
        const double psi = rng.normal(0.0, 0.4);             // layout phase jitter
        const double rho = rng.normal(0.0, 0.4);             // texture phase jitter
        const double amp = 1.0 + 0.1 * rng.normal();
        const double ct = std::cos(theta), st = std::sin(theta);
        const double cp = std::cos(phi), sp = std::sin(phi);
        double* img = ds.images.data() + n * ds.sample_size();
        double* ch0 = img;
        double* ch1 = img + static_cast<int64_t>(size) * size;
        double* ch2 = img + 2LL * size * size;
        for (int y = 0; y < size; ++y) {
            const double v = y * inv - 0.5;
            for (int x = 0; x < size; ++x) {
                const double u = x * inv - 0.5;
                const double layout = std::sin(2.0 * M_PI * 1.25 * (u * cp + v * sp) + psi);
                const double bars = std::sin(2.0 * M_PI * freq * (u * ct + v * st) + rho);
                const int q = (u >= 0.0 ? 1 : 0) + (v >= 0.0 ? 2 : 0);
                const double mask = q == quad ? 1.0 : 0.35;
                const int64_t p = static_cast<int64_t>(y) * size + x;
                ch0[p] = amp * layout + 0.35 * rng.normal();
                ch1[p] = amp * bars * mask + 0.35 * rng.normal();
                ch2[p] = 0.5 * amp * (layout + bars) + 0.35 * rng.normal();
            }
        }
    }
    return ds;
}

void write_dataset_dir(const std::string& dir, const Dataset& train, const Dataset& eval) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
    auto write_split = [&](const Dataset& ds, const std::string& split) {
        Tensor t({ds.count, ds.channels, ds.height, ds.width});
        t.data = ds.images;
        write_tensor_file(dir + "/" + split + "_images.lten", t);
        std::ostringstream os;
        os << "index,class\n";
        for (int64_t i = 0; i < ds.count; ++i) os << i << "," << ds.labels[static_cast<size_t>(i)] << "\n";
        atomic_write(dir + "/" + split + "_labels.csv", os.str());
    };
    write_split(train, "train");
    write_split(eval, "eval");
}

Dataset load_split(const std::string& dir, const std::string& split) {
    const std::string img_path = dir + "/" + split + "_images.lten";
    const std::string lbl_path = dir + "/" + split + "_labels.csv";
    Tensor t = read_tensor_file(img_path);
    if (t.rank() != 4) throw IoError("dataset images must be rank 4 [N,C,H,W]: " + img_path);
    Dataset ds;
    ds.count = t.dim(0);
    ds.channels = t.dim(1);
    ds.height = t.dim(2);
    ds.width = t.dim(3);
    ds.images = std::move(t.data);
    std::ifstream is(lbl_path);
    if (!is) throw IoError("cannot open: " + lbl_path);
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw IoError("bad label row '" + line + "' in " + lbl_path);
        ds.labels.push_back(std::stoi(line.substr(comma + 1)));
    }
    if (static_cast<int64_t>(ds.labels.size()) != ds.count) {
        throw IoError("label count " + std::to_string(ds.labels.size()) + " != image count " +
                      std::to_string(ds.count) + " in " + dir);
    }
    return ds;
}

TensorPtr make_batch(const Dataset& ds, const int64_t* idx, int64_t n, const uint8_t* flip,
                     std::vector<int>& labels_out) {
    auto batch = tensor({n, ds.channels, ds.height, ds.width});
    labels_out.resize(static_cast<size_t>(n));
    const int64_t ss = ds.sample_size();
    for (int64_t i = 0; i < n; ++i) {
        const double* src = ds.sample(idx[i]);
        double* dst = batch->data.data() + i * ss;
        if (flip && flip[i]) {
            for (int64_t c = 0; c < ds.channels; ++c) {
                for (int64_t y = 0; y < ds.height; ++y) {
                    const double* row = src + (c * ds.height + y) * ds.width;
                    double* drow = dst + (c * ds.height + y) * ds.width;
                    for (int64_t x = 0; x < ds.width; ++x) drow[x] = row[ds.width - 1 - x];
                }
            }
        } else {
            std::copy_n(src, ss, dst);
        }
        labels_out[static_cast<size_t>(i)] = ds.labels[static_cast<size_t>(idx[i])];
    }
    return batch;
}

}  // namespace lesa
