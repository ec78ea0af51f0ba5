#include "pbnn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace pbnn {

namespace {

std::uint32_t read_be32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error(path + ": truncated file");
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char ch = line[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += ch;
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    cells.push_back(cur);
    return cells;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 bool transpose) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw std::runtime_error(images_path + ": cannot open");
    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw std::runtime_error(labels_path + ": cannot open");

    if (read_be32(img, images_path) != 0x00000803u)
        throw std::runtime_error(images_path + ": bad magic (want 0x00000803)");
    if (read_be32(lab, labels_path) != 0x00000801u)
        throw std::runtime_error(labels_path + ": bad magic (want 0x00000801)");

    std::uint32_t n_img = read_be32(img, images_path);
    std::uint32_t h = read_be32(img, images_path);
    std::uint32_t w = read_be32(img, images_path);
    std::uint32_t n_lab = read_be32(lab, labels_path);
    if (n_img != n_lab)
        throw std::runtime_error("count mismatch: " + std::to_string(n_img) +
                                 " images vs " + std::to_string(n_lab) + " labels");

    Dataset ds;
    ds.name = images_path;
    ds.inputs = Tensor({n_img, 1, h, w});
    ds.labels.resize(n_lab);
    std::vector<unsigned char> row(h * w);
    for (std::uint32_t i = 0; i < n_img; ++i) {
        img.read(reinterpret_cast<char*>(row.data()), row.size());
        if (!img) throw std::runtime_error(images_path + ": truncated file");
        double* out = ds.inputs.data.data() + std::size_t(i) * h * w;
        if (transpose) {
            for (std::uint32_t y = 0; y < h; ++y)
                for (std::uint32_t x = 0; x < w; ++x)
                    out[y * w + x] = row[x * h + y] / 255.0;
        } else {
            for (std::size_t p = 0; p < row.size(); ++p) out[p] = row[p] / 255.0;
        }
    }
    int max_label = 0;
    for (std::uint32_t i = 0; i < n_lab; ++i) {
        unsigned char b;
        lab.read(reinterpret_cast<char*>(&b), 1);
        if (!lab) throw std::runtime_error(labels_path + ": truncated file");
        ds.labels[i] = b;
        max_label = std::max(max_label, int(b));
    }
    ds.class_count = max_label + 1;
    return ds;
}

Dataset load_csv(const std::string& path, const std::string& label_column,
                 const std::vector<std::string>& feature_columns) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path + ": cannot open");
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
    auto header = split_csv_line(line);

    auto col_index = [&](const std::string& name) {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end())
            throw std::runtime_error(path + ": missing column '" + name + "'");
        return std::size_t(it - header.begin());
    };
    std::size_t label_col = col_index(label_column);
    std::vector<std::size_t> feat_cols;
    if (feature_columns.empty()) {
        for (std::size_t c = 0; c < header.size(); ++c)
            if (c != label_col) feat_cols.push_back(c);
    } else {
        for (const auto& name : feature_columns) feat_cols.push_back(col_index(name));
    }

    std::vector<double> values;
    std::vector<int> labels;
    std::map<std::string, int> label_ids;
    std::vector<std::string> label_order;
    std::size_t row_no = 1;
    while (std::getline(in, line)) {
        ++row_no;
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        if (cells.size() != header.size())
            throw std::runtime_error(path + ": row " + std::to_string(row_no) +
                                     " has " + std::to_string(cells.size()) +
                                     " cells, expected " + std::to_string(header.size()));
        for (std::size_t c : feat_cols) {
            std::size_t pos = 0;
            double v = 0.0;
            try {
                v = std::stod(cells[c], &pos);
            } catch (const std::exception&) {
                pos = 0;
            }
            if (pos != cells[c].size() || cells[c].empty())
                throw std::runtime_error(path + ": unparseable cell at row " +
                                         std::to_string(row_no) + " column '" +
                                         header[c] + "'");
            values.push_back(v);
        }
        const std::string& raw = cells[label_col];
        auto it = label_ids.find(raw);
        if (it == label_ids.end()) {
            it = label_ids.emplace(raw, int(label_order.size())).first;
            label_order.push_back(raw);
        }
        labels.push_back(it->second);
    }
    Dataset ds;
    ds.name = path;
    ds.inputs = Tensor({labels.size(), feat_cols.size()}, std::move(values));
    ds.labels = std::move(labels);
    ds.class_count = int(label_order.size());
    return ds;
}

void save_csv(const Dataset& ds, const std::string& path,
              const std::string& label_column) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    std::size_t feat = ds.inputs.size() / std::max<std::size_t>(1, ds.size());
    for (std::size_t c = 0; c < feat; ++c) out << "f" << c << ",";
    out << label_column << "\n";
    out.precision(17);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t c = 0; c < feat; ++c) out << ds.inputs.data[i * feat + c] << ",";
        out << ds.labels[i] << "\n";
    }
}

Dataset gen_two_spirals(std::size_t n_per_class, double noise, std::uint64_t seed) {
    if (n_per_class < 1) throw std::invalid_argument("n_per_class must be >= 1");
    if (noise < 0.0) throw std::invalid_argument("noise must be >= 0");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Dataset ds;
    ds.name = "two_spirals";
    ds.class_count = 2;
    ds.inputs = Tensor({2 * n_per_class, 2});
    ds.labels.resize(2 * n_per_class);
    const double r0 = 0.15, r1 = 1.0, turns = 1.75;
    for (std::size_t cls = 0; cls < 2; ++cls)
        for (std::size_t i = 0; i < n_per_class; ++i) {
            double t = n_per_class > 1 ? double(i) / double(n_per_class - 1) : 0.0;
            double r = r0 + (r1 - r0) * t;
            double a = turns * 2.0 * M_PI * t + (cls == 1 ? M_PI : 0.0);
            std::size_t row = cls * n_per_class + i;
            ds.inputs.data[row * 2 + 0] = r * std::cos(a) + noise * gauss(rng);
            ds.inputs.data[row * 2 + 1] = r * std::sin(a) + noise * gauss(rng);
            ds.labels[row] = int(cls);
        }
    return ds;
}

Dataset gen_quadrant_xor(std::size_t n_points, std::uint64_t seed, double margin) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(margin, 1.0);
    std::uniform_int_distribution<int> sign(0, 1);
    Dataset ds;
    ds.name = "quadrant_xor";
    ds.class_count = 2;
    ds.inputs = Tensor({n_points, 2});
    ds.labels.resize(n_points);
    for (std::size_t i = 0; i < n_points; ++i) {
        double x = u(rng) * (sign(rng) ? 1.0 : -1.0);
        double y = u(rng) * (sign(rng) ? 1.0 : -1.0);
        ds.inputs.data[i * 2 + 0] = x;
        ds.inputs.data[i * 2 + 1] = y;
        ds.labels[i] = x * y > 0.0 ? 1 : 0;
    }
    return ds;
}

Dataset subset(const Dataset& ds, const std::vector<std::size_t>& indices) {
    Dataset out;
    out.name = ds.name;
    out.class_count = ds.class_count;
    out.inputs = gather_inputs(ds, indices);
    out.labels.reserve(indices.size());
    for (auto i : indices) out.labels.push_back(ds.labels.at(i));
    return out;
}

Splits split(const Dataset& ds, const SplitSpec& spec) {
    if (spec.train <= 0.0 || spec.val <= 0.0 || spec.test <= 0.0 ||
        std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9)
        throw std::invalid_argument("split fractions must be in (0,1) and sum to 1");
    std::size_t n = ds.size();

    auto partition = [&](std::vector<std::size_t>& idx, std::vector<std::size_t>& tr,
                         std::vector<std::size_t>& va, std::vector<std::size_t>& te) {
        std::size_t m = idx.size();
        std::size_t n_tr = std::size_t(std::llround(spec.train * double(m)));
        std::size_t n_va = std::size_t(std::llround(spec.val * double(m)));
        n_tr = std::min(n_tr, m);
        n_va = std::min(n_va, m - n_tr);
        tr.insert(tr.end(), idx.begin(), idx.begin() + n_tr);
        va.insert(va.end(), idx.begin() + n_tr, idx.begin() + n_tr + n_va);
        te.insert(te.end(), idx.begin() + n_tr + n_va, idx.end());
    };

    std::vector<std::size_t> tr, va, te;
    std::mt19937_64 rng(spec.seed);
    if (spec.stratified) {
        for (int cls = 0; cls < ds.class_count; ++cls) {
            std::vector<std::size_t> idx;
            for (std::size_t i = 0; i < n; ++i)
                if (ds.labels[i] == cls) idx.push_back(i);
            std::shuffle(idx.begin(), idx.end(), rng);
            partition(idx, tr, va, te);
        }
        std::sort(tr.begin(), tr.end());
        std::sort(va.begin(), va.end());
        std::sort(te.begin(), te.end());
    } else {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        partition(idx, tr, va, te);
    }
    if (tr.empty() || va.empty() || te.empty())
        throw std::invalid_argument("a split received 0 samples");
    return {subset(ds, tr), subset(ds, va), subset(ds, te)};
}

std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                              std::optional<std::uint64_t> shuffle_seed) {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (shuffle_seed) {
        std::mt19937_64 rng(*shuffle_seed);
        std::shuffle(idx.begin(), idx.end(), rng);
    }
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n; i += batch_size) {
        out.emplace_back(idx.begin() + i, idx.begin() + std::min(n, i + batch_size));
    }
    return out;
}

Tensor gather_inputs(const Dataset& ds, const std::vector<std::size_t>& indices) {
    std::size_t row = ds.inputs.size() / std::max<std::size_t>(1, ds.inputs.shape[0]);
    std::vector<std::size_t> shape = ds.inputs.shape;
    shape[0] = indices.size();
    Tensor out(shape);
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::copy_n(ds.inputs.data.data() + indices[i] * row, row,
                    out.data.data() + i * row);
    return out;
}

}  // namespace pbnn
