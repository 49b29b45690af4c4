// maskdistill: command-line driver. Each subcommand is one pipeline stage and
// stages only talk through files (MDFP packs, JSONL manifests, PGM indexes).

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "maskdistill/candidate_pipeline.hpp"
#include "maskdistill/embedding_cluster.hpp"
#include "maskdistill/errors.hpp"
#include "maskdistill/evaluation.hpp"
#include "maskdistill/feature_store.hpp"
#include "maskdistill/mask_distiller.hpp"
#include "maskdistill/parallel.hpp"
#include "maskdistill/seg_loss.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace maskdistill;

namespace {

enum ExitCode : int {
    kOk = 0,
    kRecordErrors = 1,  // some records failed and were skipped
    kParameter = 2,
    kFormat = 3,
    kIo = 4,
    kLookup = 5,
    kInternal = 6,
};

const char* error_kind(const std::exception& e) {
    if (dynamic_cast<const ParameterError*>(&e)) return "parameter";
    if (dynamic_cast<const FormatError*>(&e)) return "format";
    if (dynamic_cast<const CorruptionError*>(&e)) return "corruption";
    if (dynamic_cast<const ValidationError*>(&e)) return "validation";
    if (dynamic_cast<const IoError*>(&e)) return "io";
    if (dynamic_cast<const LookupError*>(&e)) return "lookup";
    if (dynamic_cast<const EmptyMaskError*>(&e)) return "empty_mask";
    return "internal";
}

int exit_code_for(const std::string& kind) {
    if (kind == "parameter") return kParameter;
    if (kind == "format" || kind == "corruption" || kind == "validation" || kind == "empty_mask") return kFormat;
    if (kind == "io") return kIo;
    if (kind == "lookup") return kLookup;
    return kInternal;
}

/// Collects failures; the summary goes to stderr as one JSON line.
class ErrorLog {
public:
    void record(const std::string& image_id, const std::exception& e) {
        std::lock_guard lock(mutex_);
        std::cerr << "maskdistill: " << (image_id.empty() ? "" : image_id + ": ") << e.what() << '\n';
        ordered_json entry;
        entry["image_id"] = image_id.empty() ? json(nullptr) : json(image_id);
        entry["kind"] = error_kind(e);
        entry["message"] = e.what();
        entries_.push_back(std::move(entry));
    }

    bool empty() const { return entries_.empty(); }

    void sort_by_image() {
        std::stable_sort(entries_.begin(), entries_.end(), [](const ordered_json& a, const ordered_json& b) {
            return a["image_id"].dump() < b["image_id"].dump();
        });
    }

    void print_summary(int code) const {
        ordered_json summary;
        summary["status"] = "error";
        summary["exit_code"] = code;
        summary["error_count"] = entries_.size();
        summary["errors"] = entries_;
        std::cerr << summary.dump() << '\n';
    }

private:
    std::mutex mutex_;
    std::vector<ordered_json> entries_;
};

std::size_t default_threads() {
    if (const char* env = std::getenv("MASKDISTILL_THREADS"); env != nullptr && *env != '\0') {
        char* end = nullptr;
        const unsigned long v = std::strtoul(env, &end, 10);
        if (end == nullptr || *end != '\0' || v == 0) {
            throw ParameterError(std::string("MASKDISTILL_THREADS must be a positive integer, got '") + env + "'");
        }
        return v;
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Every tunable of every subcommand. Defaults, then the JSON config file,
/// then command-line flags, in increasing precedence.
struct Settings {
    std::size_t threads = 1;
    std::uint64_t seed = 0;

    // distill
    std::string packs;
    double k_fraction = 0.4;
    std::string component = "source";

    // cluster
    std::string embeddings;
    std::string model;
    std::string model_in;
    std::size_t k = 20;
    std::size_t restarts = 10;
    std::size_t max_iter = 300;
    bool l2_normalize = false;

    // build-pgt
    double tau = 0.9;
    std::string overlap = "per-pixel";
    double nms_iou = 0.5;
    std::uint32_t num_classes = 0;
    std::string instances;

    // eval
    std::string pred;
    std::string gt;
    int ignore_label = 255;
    std::size_t n_pred = 0;
    std::size_t n_gt = 0;
    std::string protocol = "multi";
    std::string mode = "agnostic";
    std::size_t max_dets = 100;

    // loss-check
    std::string input;
    double top_fraction = 0.2;
    std::string normalization = "pixels-classes";
    double eps = 1e-4;

    // shared paths
    std::string manifest;
    std::string out;
    std::string report;
};

template <typename T>
void take(const json& cfg, const char* key, T& dst) {
    if (!cfg.contains(key)) return;
    try {
        dst = cfg.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ParameterError(std::string("config key '") + key + "': " + e.what());
    }
}

void take_path(const json& cfg, const char* key, std::string& dst, const fs::path& base) {
    std::string v;
    take(cfg, key, v);
    if (v.empty()) return;
    const fs::path p(v);
    dst = p.is_absolute() ? v : (base / p).lexically_normal().string();
}

/// Loads a JSON config. Relative paths resolve against the file's directory.
void apply_config(const fs::path& path, Settings& s) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    json cfg;
    try {
        cfg = json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("config " + path.string() + ": " + e.what());
    }
    if (!cfg.is_object()) throw FormatError("config " + path.string() + ": top level must be an object");

    static const std::set<std::string> known{
        "threads", "seed", "packs", "k_fraction", "component", "embeddings", "model", "model_in", "k", "restarts",
        "max_iter", "l2_normalize", "tau", "overlap", "nms_iou", "num_classes", "instances", "pred", "gt",
        "ignore_label", "n_pred", "n_gt", "protocol", "mode", "max_dets", "input", "top_fraction", "normalization",
        "eps", "manifest", "out", "report"};
    for (const auto& [key, value] : cfg.items()) {
        if (!known.contains(key)) throw ParameterError("config " + path.string() + ": unknown key '" + key + "'");
    }
    const fs::path base = path.parent_path();
    take(cfg, "threads", s.threads);
    take(cfg, "seed", s.seed);
    take(cfg, "k_fraction", s.k_fraction);
    take(cfg, "component", s.component);
    take(cfg, "k", s.k);
    take(cfg, "restarts", s.restarts);
    take(cfg, "max_iter", s.max_iter);
    take(cfg, "l2_normalize", s.l2_normalize);
    take(cfg, "tau", s.tau);
    take(cfg, "overlap", s.overlap);
    take(cfg, "nms_iou", s.nms_iou);
    take(cfg, "num_classes", s.num_classes);
    take(cfg, "ignore_label", s.ignore_label);
    take(cfg, "n_pred", s.n_pred);
    take(cfg, "n_gt", s.n_gt);
    take(cfg, "protocol", s.protocol);
    take(cfg, "mode", s.mode);
    take(cfg, "max_dets", s.max_dets);
    take(cfg, "top_fraction", s.top_fraction);
    take(cfg, "normalization", s.normalization);
    take(cfg, "eps", s.eps);
    for (const auto& [key, dst] : std::initializer_list<std::pair<const char*, std::string*>>{
             {"packs", &s.packs},
             {"embeddings", &s.embeddings},
             {"model", &s.model},
             {"model_in", &s.model_in},
             {"instances", &s.instances},
             {"pred", &s.pred},
             {"gt", &s.gt},
             {"input", &s.input},
             {"manifest", &s.manifest},
             {"out", &s.out},
             {"report", &s.report}}) {
        take_path(cfg, key, *dst, base);
    }
}

/// The config file has to be read before CLI11 assigns flag values, so that
/// flags win. This finds --config in argv ahead of the real parse.
std::optional<fs::path> find_config_arg(int argc, char** argv) {
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--") break;
        if (a == "--config" && i + 1 < argc) return fs::path(argv[i + 1]);
        if (a.rfind("--config=", 0) == 0) return fs::path(a.substr(9));
    }
    return std::nullopt;
}

void require(const std::string& value, const char* flag) {
    if (value.empty()) throw ParameterError(std::string("missing required setting ") + flag);
}

void require_exists(const std::string& path, const char* flag) {
    require(path, flag);
    if (!fs::exists(path)) throw IoError(std::string(flag) + ": no such file or directory: " + path);
}

/// Writes a JSON report to `path`, or to stdout when empty.
void emit_report(const ordered_json& report, const std::string& path) {
    const std::string text = report.dump(2) + "\n";
    if (path.empty()) {
        std::cout << text;
    } else {
        write_file_atomic(path, text);
    }
}

ComponentMode parse_component(const std::string& v) {
    if (v == "source") return ComponentMode::source_component;
    if (v == "all") return ComponentMode::all;
    throw ParameterError("component must be 'source' or 'all', got '" + v + "'");
}

OverlapMode parse_overlap(const std::string& v) {
    if (v == "per-pixel") return OverlapMode::per_pixel;
    if (v == "mask-nms") return OverlapMode::mask_nms;
    throw ParameterError("overlap must be 'per-pixel' or 'mask-nms', got '" + v + "'");
}

ApProtocol parse_protocol(const std::string& v) {
    if (v == "single") return ApProtocol::single;
    if (v == "multi") return ApProtocol::multi;
    throw ParameterError("protocol must be 'single' or 'multi', got '" + v + "'");
}

ClassMode parse_mode(const std::string& v) {
    if (v == "agnostic") return ClassMode::agnostic;
    if (v == "semantic") return ClassMode::semantic;
    throw ParameterError("mode must be 'agnostic' or 'semantic', got '" + v + "'");
}

LossNormalization parse_normalization(const std::string& v) {
    if (v == "pixels-classes") return LossNormalization::pixels_times_classes;
    if (v == "pixels") return LossNormalization::pixels;
    throw ParameterError("normalization must be 'pixels-classes' or 'pixels', got '" + v + "'");
}

std::vector<ObjectCandidate> sorted_by_image(std::vector<ObjectCandidate> records) {
    std::stable_sort(records.begin(), records.end(),
                     [](const ObjectCandidate& a, const ObjectCandidate& b) { return a.image_id < b.image_id; });
    return records;
}

// ---------------------------------------------------------------- commands

int cmd_distill(const Settings& s, ErrorLog& log) {
    require_exists(s.packs, "--packs");
    require(s.out, "--out");
    DistillConfig cfg;
    cfg.k_fraction = s.k_fraction;
    cfg.component_mode = parse_component(s.component);
    proposal_count(cfg.k_fraction, 1);  // validates k_fraction before any work

    const auto paths = list_feature_packs(s.packs);
    std::vector<std::optional<ObjectCandidate>> results(paths.size());
    parallel_for(paths.size(), s.threads, [&](std::size_t i) {
        const std::string id = paths[i].stem().string();
        try {
            results[i] = distill(read_feature_pack(paths[i]), cfg);
        } catch (const std::exception& e) {
            log.record(id, e);
        }
    });
    std::vector<ObjectCandidate> manifest;
    for (auto& r : results) {
        if (r) manifest.push_back(std::move(*r));
    }
    write_manifest(sorted_by_image(std::move(manifest)), s.out);
    return log.empty() ? kOk : kRecordErrors;
}

int cmd_cluster(const Settings& s, ErrorLog&) {
    require_exists(s.manifest, "--manifest");
    require_exists(s.embeddings, "--embeddings");
    require(s.out, "--out");
    const auto manifest = read_manifest(s.manifest);
    const auto table = EmbeddingTable::from_pack_dir(s.embeddings);

    KMeansModel model;
    if (!s.model_in.empty()) {
        require_exists(s.model_in, "--model-in");
        model = read_kmeans_model(s.model_in);
    } else {
        require(s.model, "--model");
        PointMatrix points = gather_embeddings(manifest, table);
        if (s.l2_normalize) l2_normalize_rows(points);
        KMeansOptions opts;
        opts.k = s.k;
        opts.seed = s.seed;
        opts.restarts = s.restarts;
        opts.max_iter = s.max_iter;
        write_kmeans_model(kmeans_fit(points, opts), s.model);
        // Labels come from the stored f32 centroids so that reusing the
        // sidecar later reproduces them exactly.
        model = read_kmeans_model(s.model);
    }
    write_manifest(sorted_by_image(label_candidates(manifest, table, model, s.l2_normalize)), s.out);
    return kOk;
}

int cmd_build_pgt(const Settings& s, ErrorLog&) {
    require_exists(s.manifest, "--manifest");
    require(s.out, "--out");
    PipelineConfig cfg;
    cfg.tau = s.tau;
    cfg.seed = s.seed;
    cfg.overlap_mode = parse_overlap(s.overlap);
    cfg.nms_iou = s.nms_iou;
    cfg.num_classes = s.num_classes;
    cfg.validate();

    const auto manifest = read_manifest(s.manifest);
    const auto pgt = build_pseudo_ground_truth(manifest, cfg, s.threads);
    write_pgm_index(pgt.maps, s.out);

    if (!s.instances.empty()) {
        const auto groups = group_by_image(manifest);
        std::vector<ObjectCandidate> instances;
        for (std::size_t i = 0; i < pgt.maps.size(); ++i) {
            const auto inst = map_to_instances(pgt.maps[i], groups[i]);
            instances.insert(instances.end(), inst.begin(), inst.end());
        }
        write_manifest(instances, s.instances);
    }
    return kOk;
}

ordered_json iou_list(const std::vector<std::optional<double>>& values) {
    ordered_json out = ordered_json::array();
    for (const auto& v : values) out.push_back(v ? ordered_json(*v) : ordered_json(nullptr));
    return out;
}

int cmd_eval_semseg(const Settings& s, ErrorLog&) {
    require_exists(s.pred, "--pred");
    require_exists(s.gt, "--gt");
    SemsegOptions opts;
    opts.ignore_label = s.ignore_label;
    opts.n_pred = s.n_pred;
    opts.n_gt = s.n_gt;
    const auto r = evaluate_semseg(read_pgm_index(s.pred), read_pgm_index(s.gt), opts);

    ordered_json report;
    report["metric"] = "semseg";
    report["miou"] = r.miou;
    report["pixel_count"] = r.pixel_count;
    report["per_class_iou"] = iou_list(r.per_class_iou);
    report["assignment"] = r.assignment;
    report["undefined_classes"] = r.undefined_classes;
    report["unmatched_gt_classes"] = r.unmatched_gt_classes;
    report["unmatched_pred_clusters"] = r.unmatched_pred_clusters;
    emit_report(report, s.report);
    return kOk;
}

int cmd_eval_instseg(const Settings& s, ErrorLog&) {
    require_exists(s.pred, "--pred");
    require_exists(s.gt, "--gt");
    const ApProtocol protocol = parse_protocol(s.protocol);
    const ClassMode mode = parse_mode(s.mode);
    if (s.max_dets == 0) throw ParameterError("max-dets must be >= 1");
    const auto pred = read_manifest(s.pred);
    const auto gt = read_manifest(s.gt);

    std::map<int, int> mapping;
    if (mode == ClassMode::semantic) mapping = match_instance_clusters(pred, gt);
    ApOptions opts;
    opts.max_dets = s.max_dets;
    const auto r = mask_ap(pred, gt, protocol, mode, mapping, opts);

    ordered_json report;
    report["metric"] = "instseg";
    report["protocol"] = s.protocol;
    report["mode"] = s.mode;
    report["valid"] = r.valid;
    report["ap"] = r.ap;
    report["ap50"] = r.ap50;
    report["ap75"] = r.ap75;
    ordered_json thresholds = ordered_json::object();
    for (std::size_t t = 0; t < r.per_threshold.size(); ++t) {
        char key[8];
        std::snprintf(key, sizeof key, "%.2f", static_cast<double>(50 + 5 * t) / 100.0);
        thresholds[key] = r.per_threshold[t];
    }
    report["per_threshold"] = thresholds;
    if (mode == ClassMode::semantic) {
        ordered_json per_class = ordered_json::object();
        for (const auto& [cls, ap] : r.per_class_ap) {
            per_class[std::to_string(cls)] = {{"ap", ap}, {"ap50", r.per_class_ap50.at(cls)}};
        }
        report["per_class"] = per_class;
        ordered_json m = ordered_json::object();
        for (const auto& [cluster, cls] : mapping) m[std::to_string(cluster)] = cls;
        report["cluster_to_class"] = m;
    }
    emit_report(report, s.report);
    return kOk;
}

int cmd_loss_check(const Settings& s, ErrorLog&) {
    require_exists(s.input, "--input");
    if (!(s.eps > 0.0)) throw ParameterError("eps must be > 0");
    LossInput in = read_loss_input(s.input);
    in.top_fraction = s.top_fraction;
    in.normalization = parse_normalization(s.normalization);
    in.validate();
    const auto r = hard_mining_ce(in);
    const auto numeric = finite_difference_grad(in, s.eps);

    ordered_json report;
    report["metric"] = "loss";
    report["n_pixels"] = in.n_pixels;
    report["n_classes"] = in.n_classes;
    report["hard_pixels"] = r.selected.size();
    report["loss"] = r.loss;
    report["max_grad_error"] = relative_grad_error(r.grad, numeric);
    emit_report(report, s.report);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    ErrorLog log;
    Settings s;
    try {
        s.threads = default_threads();
        if (const auto cfg = find_config_arg(argc, argv)) apply_config(*cfg, s);
    } catch (const std::exception& e) {
        log.record("", e);
        const int code = exit_code_for(error_kind(e));
        log.print_summary(code);
        return code;
    }

    CLI::App app{"Unsupervised object masks from transformer features: distill, cluster, "
                 "build pseudo ground truth, evaluate."};
    app.set_version_flag("--version", "maskdistill 0.1.0");
    app.require_subcommand(1);
    app.fallthrough();
    std::string config_path;
    app.add_option("--config", config_path, "JSON file with default settings; flags override it");
    app.add_option("--threads", s.threads, "Worker threads (default: $MASKDISTILL_THREADS or all cores)")
        ->check(CLI::PositiveNumber);
    app.add_option("--seed", s.seed, "Random seed");
    app.add_option("--report", s.report, "Write the JSON report here instead of stdout");

    auto* distill_cmd = app.add_subcommand("distill", "Distill one object mask per feature pack");
    distill_cmd->add_option("--packs", s.packs, "Directory of .mdfp feature packs");
    distill_cmd->add_option("--out", s.out, "Output candidate manifest (JSONL)");
    distill_cmd->add_option("--k-fraction", s.k_fraction, "Fraction of patches used as proposals");
    distill_cmd->add_option("--component", s.component, "Keep the 'source' component or 'all' patches");

    auto* cluster_cmd = app.add_subcommand("cluster", "Assign cluster labels from masked-image embeddings");
    cluster_cmd->add_option("--manifest", s.manifest, "Input candidate manifest");
    cluster_cmd->add_option("--embeddings", s.embeddings, "Directory of packs carrying cls_embed");
    cluster_cmd->add_option("--out", s.out, "Output labeled manifest");
    cluster_cmd->add_option("--model", s.model, "Where to write the fitted centroids");
    cluster_cmd->add_option("--model-in", s.model_in, "Reuse existing centroids instead of fitting");
    cluster_cmd->add_option("--k", s.k, "Number of clusters");
    cluster_cmd->add_option("--restarts", s.restarts, "k-means restarts");
    cluster_cmd->add_option("--max-iter", s.max_iter, "Lloyd iterations per restart");
    cluster_cmd->add_flag("--l2-normalize", s.l2_normalize, "L2-normalize embeddings before clustering");

    auto* pgt_cmd = app.add_subcommand("build-pgt", "Build pseudo-ground-truth label maps");
    pgt_cmd->add_option("--manifest", s.manifest, "Labeled candidate manifest");
    pgt_cmd->add_option("--out", s.out, "Output directory for PGM maps and index.tsv");
    pgt_cmd->add_option("--tau", s.tau, "Confidence threshold");
    pgt_cmd->add_option("--overlap", s.overlap, "'per-pixel' or 'mask-nms'");
    pgt_cmd->add_option("--nms-iou", s.nms_iou, "IoU threshold for mask-nms");
    pgt_cmd->add_option("--num-classes", s.num_classes, "Number of foreground classes (0: infer)");
    pgt_cmd->add_option("--instances", s.instances, "Also write per-label instances as a manifest");

    auto* semseg_cmd = app.add_subcommand("eval-semseg", "Hungarian-matched mIoU of label maps");
    semseg_cmd->add_option("--pred", s.pred, "Predicted index.tsv");
    semseg_cmd->add_option("--gt", s.gt, "Ground-truth index.tsv");
    semseg_cmd->add_option("--ignore-label", s.ignore_label, "Ground-truth value to skip");
    semseg_cmd->add_option("--n-pred", s.n_pred, "Number of predicted labels (0: infer)");
    semseg_cmd->add_option("--n-gt", s.n_gt, "Number of ground-truth labels (0: infer)");

    auto* inst_cmd = app.add_subcommand("eval-instseg", "COCO-style mask AP of manifests");
    inst_cmd->add_option("--pred", s.pred, "Predicted manifest");
    inst_cmd->add_option("--gt", s.gt, "Ground-truth manifest");
    inst_cmd->add_option("--protocol", s.protocol, "'single' or 'multi'");
    inst_cmd->add_option("--mode", s.mode, "'agnostic' or 'semantic'");
    inst_cmd->add_option("--max-dets", s.max_dets, "Detections kept per image");

    auto* loss_cmd = app.add_subcommand("loss-check", "Hard-pixel cross-entropy and gradient check");
    loss_cmd->add_option("--input", s.input, "MDLG logits/targets file");
    loss_cmd->add_option("--top-fraction", s.top_fraction, "Fraction of hardest pixels kept");
    loss_cmd->add_option("--normalization", s.normalization, "'pixels-classes' or 'pixels'");
    loss_cmd->add_option("--eps", s.eps, "Central-difference step");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kParameter;
    }

    const std::vector<std::pair<CLI::App*, int (*)(const Settings&, ErrorLog&)>> commands{
        {distill_cmd, cmd_distill},     {cluster_cmd, cmd_cluster},       {pgt_cmd, cmd_build_pgt},
        {semseg_cmd, cmd_eval_semseg}, {inst_cmd, cmd_eval_instseg}, {loss_cmd, cmd_loss_check}};
    int code = kInternal;
    try {
        if (s.threads == 0) throw ParameterError("threads must be >= 1");
        for (const auto& [cmd, run] : commands) {
            if (cmd->parsed()) code = run(s, log);
        }
    } catch (const LookupError& e) {
        log.record(e.image_id(), e);
        code = kLookup;
    } catch (const std::exception& e) {
        log.record("", e);
        code = exit_code_for(error_kind(e));
    }
    if (!log.empty()) {
        log.sort_by_image();
        log.print_summary(code);
    }
    return code;
}
