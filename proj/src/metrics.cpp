#include "unidiff/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace unidiff {

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t s = 0;
    for (auto v : counts) s += v;
    return s;
}

std::uint64_t ConfusionMatrix::row_sum(int k) const {
    std::uint64_t s = 0;
    for (int j = 0; j < num_classes; ++j) s += at(k, j);
    return s;
}

std::uint64_t ConfusionMatrix::col_sum(int k) const {
    std::uint64_t s = 0;
    for (int i = 0; i < num_classes; ++i) s += at(i, k);
    return s;
}

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> pred, int num_classes) {
    if (num_classes < 2) throw std::invalid_argument("confusion matrix needs at least 2 classes");
    if (truth.size() != pred.size()) throw std::invalid_argument("label and prediction counts differ");
    if (truth.empty()) throw std::invalid_argument("confusion matrix of an empty label set");
    ConfusionMatrix cm;
    cm.num_classes = num_classes;
    cm.counts.assign(static_cast<std::size_t>(num_classes) * num_classes, 0);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const int y = truth[i], p = pred[i];
        if (y < 1 || y > num_classes || p < 1 || p > num_classes) {
            throw std::out_of_range("label pair " + std::to_string(i) + " (" + std::to_string(y) + ", " + std::to_string(p) +
                                    ") outside [1, " + std::to_string(num_classes) + "]");
        }
        ++cm.counts[static_cast<std::size_t>(y - 1) * num_classes + (p - 1)];
    }
    return cm;
}

ConfusionMatrix confusion_from_counts(int num_classes, std::vector<std::uint64_t> counts) {
    if (num_classes < 2) throw std::invalid_argument("confusion matrix needs at least 2 classes");
    if (counts.size() != static_cast<std::size_t>(num_classes) * num_classes) throw std::invalid_argument("confusion counts are not K x K");
    return ConfusionMatrix{num_classes, std::move(counts)};
}

Scores scores(const ConfusionMatrix& cm) {
    const int k = cm.num_classes;
    const double n = static_cast<double>(cm.total());
    if (n <= 0) throw std::invalid_argument("scores of an empty confusion matrix");
    Scores s;
    s.per_class.resize(k);
    double trace = 0.0, pe = 0.0;
    double aa = 0.0, f1 = 0.0, iou = 0.0;
    int present = 0;
    for (int c = 0; c < k; ++c) {
        const double tp = static_cast<double>(cm.at(c, c));
        const double row = static_cast<double>(cm.row_sum(c));
        const double col = static_cast<double>(cm.col_sum(c));
        trace += tp;
        pe += row * col;
        ClassScores& cs = s.per_class[c];
        cs.present = row > 0;
        cs.recall = row > 0 ? tp / row : 0.0;
        cs.precision = col > 0 ? tp / col : 0.0;
        cs.f1 = cs.recall + cs.precision > 0 ? 2.0 * cs.recall * cs.precision / (cs.recall + cs.precision) : 0.0;
        const double uni = row + col - tp;
        cs.iou = uni > 0 ? tp / uni : 0.0;
        if (!cs.present) {
            s.absent.push_back(c + 1);
            continue;
        }
        ++present;
        aa += cs.recall;
        f1 += cs.f1;
        iou += cs.iou;
    }
    s.p_o = trace / n;
    s.p_e = pe / (n * n);
    s.oa = s.p_o;
    s.kappa = s.p_e < 1.0 ? (s.p_o - s.p_e) / (1.0 - s.p_e) : 1.0;
    s.aa = aa / present;
    s.mf1 = f1 / present;
    s.miou = iou / present;
    return s;
}

namespace {

std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * v);
    return buf;
}

void check_names(const ConfusionMatrix& cm, const std::vector<std::string>& names) {
    if (static_cast<int>(names.size()) != cm.num_classes) {
        throw std::invalid_argument("report needs " + std::to_string(cm.num_classes) + " class names, got " + std::to_string(names.size()));
    }
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"') out += '"';
        out += ch;
    }
    return out + "\"";
}

}  // namespace

std::string report_csv(const ConfusionMatrix& cm, const std::vector<std::string>& names) {
    check_names(cm, names);
    const Scores s = scores(cm);
    std::ostringstream out;
    out << "class,recall,precision,F1,IoU\n";
    for (int c = 0; c < cm.num_classes; ++c) {
        const auto& cs = s.per_class[c];
        if (!cs.present) {
            out << csv_field(names[c]) << ",absent,,,\n";
            continue;
        }
        out << csv_field(names[c]) << ',' << pct(cs.recall) << ',' << pct(cs.precision) << ',' << pct(cs.f1) << ',' << pct(cs.iou) << '\n';
    }
    out << "OA," << pct(s.oa) << ",,,\n";
    out << "AA," << pct(s.aa) << ",,,\n";
    out << "Kappa," << pct(s.kappa) << ",,,\n";
    out << "mF1," << pct(s.mf1) << ",,,\n";
    out << "mIoU," << pct(s.miou) << ",,,\n";
    return out.str();
}

std::string report_text(const ConfusionMatrix& cm, const std::vector<std::string>& names, const std::string& title) {
    check_names(cm, names);
    const Scores s = scores(cm);
    std::size_t width = 5;
    for (const auto& n : names) width = std::max(width, n.size());
    char line[256];
    std::ostringstream out;
    if (!title.empty()) out << title << '\n';
    std::snprintf(line, sizeof(line), "%-*s %9s %9s %9s %9s\n", static_cast<int>(width), "Class", "Recall", "Precision", "F1", "IoU");
    out << line << std::string(width + 40, '-') << '\n';
    for (int c = 0; c < cm.num_classes; ++c) {
        const auto& cs = s.per_class[c];
        if (!cs.present) {
            std::snprintf(line, sizeof(line), "%-*s %9s\n", static_cast<int>(width), names[c].c_str(), "absent");
        } else {
            std::snprintf(line, sizeof(line), "%-*s %9s %9s %9s %9s\n", static_cast<int>(width), names[c].c_str(),
                          pct(cs.recall).c_str(), pct(cs.precision).c_str(), pct(cs.f1).c_str(), pct(cs.iou).c_str());
        }
        out << line;
    }
    out << std::string(width + 40, '-') << '\n';
    const std::pair<const char*, double> footer[] = {{"OA", s.oa}, {"AA", s.aa}, {"Kappa", s.kappa}, {"mF1", s.mf1}, {"mIoU", s.miou}};
    for (const auto& [name, v] : footer) {
        std::snprintf(line, sizeof(line), "%-*s %9s\n", static_cast<int>(width), name, pct(v).c_str());
        out << line;
    }
    return out.str();
}

std::string confusion_csv(const ConfusionMatrix& cm) {
    std::ostringstream out;
    out << "true\\pred";
    for (int j = 0; j < cm.num_classes; ++j) out << ',' << j + 1;
    out << '\n';
    for (int i = 0; i < cm.num_classes; ++i) {
        out << i + 1;
        for (int j = 0; j < cm.num_classes; ++j) out << ',' << cm.at(i, j);
        out << '\n';
    }
    return out.str();
}

ConfusionMatrix parse_confusion_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw std::invalid_argument("empty confusion CSV");
    const int k = static_cast<int>(std::count(line.begin(), line.end(), ','));
    std::vector<std::uint64_t> counts;
    int rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string cell;
        std::getline(ls, cell, ',');
        int cols = 0;
        while (std::getline(ls, cell, ',')) {
            counts.push_back(std::stoull(cell));
            ++cols;
        }
        if (cols != k) throw std::invalid_argument("confusion CSV row " + std::to_string(rows + 1) + " has " + std::to_string(cols) + " counts");
        ++rows;
    }
    if (rows != k) throw std::invalid_argument("confusion CSV is not square");
    return confusion_from_counts(k, std::move(counts));
}

}  // namespace unidiff
