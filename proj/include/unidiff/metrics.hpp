#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace unidiff {

// Rows are true classes, columns predictions; class ids are 1..K externally
// and 0-based inside the matrix.
struct ConfusionMatrix {
    int num_classes = 0;
    std::vector<std::uint64_t> counts;  // K * K, row-major

    std::uint64_t at(int truth, int pred) const { return counts[static_cast<std::size_t>(truth) * num_classes + pred]; }
    std::uint64_t total() const;
    std::uint64_t row_sum(int k) const;
    std::uint64_t col_sum(int k) const;
};

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> pred, int num_classes);
ConfusionMatrix confusion_from_counts(int num_classes, std::vector<std::uint64_t> counts);

struct ClassScores {
    bool present = false;  // has at least one true sample
    double recall = 0.0;
    double precision = 0.0;
    double f1 = 0.0;
    double iou = 0.0;
};

// Fractions in [0, 1]. Classes with no true samples are left out of AA, mF1
// and mIoU and flagged absent.
struct Scores {
    double oa = 0.0;
    double aa = 0.0;
    double kappa = 0.0;
    double mf1 = 0.0;
    double miou = 0.0;
    double p_o = 0.0;
    double p_e = 0.0;
    std::vector<ClassScores> per_class;
    std::vector<int> absent;  // 1-based ids
};

Scores scores(const ConfusionMatrix& cm);

// Percent with two decimals. Columns: class, recall, precision, F1, IoU;
// footer rows OA, AA, Kappa, mF1, mIoU.
std::string report_csv(const ConfusionMatrix& cm, const std::vector<std::string>& class_names);
std::string report_text(const ConfusionMatrix& cm, const std::vector<std::string>& class_names,
                        const std::string& title = "");

std::string confusion_csv(const ConfusionMatrix& cm);
ConfusionMatrix parse_confusion_csv(const std::string& text);

}  // namespace unidiff
