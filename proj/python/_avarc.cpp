#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "avarc/checkpoint.hpp"
#include "avarc/classifier.hpp"
#include "avarc/error.hpp"
#include "avarc/evaluation.hpp"
#include "avarc/explain.hpp"
#include "avarc/likelihood.hpp"
#include "avarc/tokenizer.hpp"
#include "avarc/training.hpp"

namespace py = pybind11;
using namespace avarc;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }
nlohmann::json from_py(const py::object& o) {
    return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

// [H, W] or [C, H, W] in [0, 1].
Image to_image(const Array& a) {
    if (a.ndim() != 2 && a.ndim() != 3) throw ShapeError("image must be [H, W] or [C, H, W]");
    const int c = a.ndim() == 3 ? static_cast<int>(a.shape(0)) : 1;
    Image im(c, static_cast<int>(a.shape(a.ndim() - 2)), static_cast<int>(a.shape(a.ndim() - 1)));
    std::copy(a.data(), a.data() + a.size(), im.pixels.begin());
    return im;
}

Array from_image(const Image& im) {
    Array out({im.channels, im.height, im.width});
    std::copy(im.pixels.begin(), im.pixels.end(), out.mutable_data());
    return out;
}

// Features as [h, w, C].
Array from_features(const FeatureMap& f) {
    Array out({f.h, f.w, f.channels});
    std::copy(f.values.begin(), f.values.end(), out.mutable_data());
    return out;
}

FeatureMap to_features(const Array& a) {
    if (a.ndim() != 3) throw ShapeError("features must be [h, w, C]");
    FeatureMap f(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)));
    std::copy(a.data(), a.data() + a.size(), f.values.begin());
    return f;
}

py::list grids_to_py(const ScaleGrids& g) {
    py::list out;
    for (int k = 0; k < g.schedule.num_scales(); ++k) {
        const auto s = g.schedule.side(k);
        Array a({s.h, s.w});
        std::copy(g.grids[static_cast<std::size_t>(k)].begin(), g.grids[static_cast<std::size_t>(k)].end(), a.mutable_data());
        out.append(a);
    }
    return out;
}

Method method_from(const py::object& o) {
    if (py::isinstance<py::str>(o)) return Method::from_json(nlohmann::json{{"method", o.cast<std::string>()}});
    return Method::from_json(from_py(o));
}

std::vector<int> labels_or_all(const std::optional<std::vector<int>>& labels, const NextScaleModel& model) {
    return labels ? *labels : all_labels(model.n_classes());
}

py::dict classification_dict(const Classification& c) {
    py::dict d;
    d["prediction"] = c.prediction;
    d["trace"] = to_py(c.trace.to_json());
    return d;
}

}  // namespace

PYBIND11_MODULE(_avarc, m) {
    m.doc() = "Next-scale autoregressive generative classifier";

    py::register_exception<Error>(m, "AvarcError", PyExc_RuntimeError);

    py::class_<ScaleSchedule>(m, "ScaleSchedule")
        .def(py::init([](const std::vector<std::pair<int, int>>& sides) {
            std::vector<ScaleSide> s;
            for (auto [h, w] : sides) s.push_back({h, w});
            return ScaleSchedule(s);
        }))
        .def_static("desk", &ScaleSchedule::desk)
        .def_static("reference", &ScaleSchedule::reference)
        .def_property_readonly("num_scales", &ScaleSchedule::num_scales)
        .def_property_readonly("sides", [](const ScaleSchedule& s) {
            std::vector<std::pair<int, int>> out;
            for (const auto& x : s.sides()) out.emplace_back(x.h, x.w);
            return out;
        })
        .def("prefix_tokens", &ScaleSchedule::prefix_tokens)
        .def("total_tokens", &ScaleSchedule::total_tokens)
        .def("__repr__", [](const ScaleSchedule& s) { return "ScaleSchedule(" + s.to_json().dump() + ")"; });

    py::class_<MultiScaleTokenMap>(m, "TokenMap")
        .def(py::init([](const ScaleSchedule& s, const std::vector<py::array_t<int, py::array::c_style | py::array::forcecast>>& grids) {
            if (grids.size() != static_cast<std::size_t>(s.num_scales())) throw ShapeError("one grid per scale is required");
            MultiScaleTokenMap t(s);
            for (std::size_t k = 0; k < grids.size(); ++k) {
                if (grids[k].size() != s.tokens_in_scale(static_cast<int>(k))) throw ShapeError("grid size disagrees with the schedule");
                t.maps[k].assign(grids[k].data(), grids[k].data() + grids[k].size());
            }
            return t;
        }))
        .def_readonly("schedule", &MultiScaleTokenMap::schedule)
        .def_property_readonly("grids", [](const MultiScaleTokenMap& t) {
            py::list out;
            for (int k = 0; k < t.schedule.num_scales(); ++k) {
                const auto s = t.schedule.side(k);
                py::array_t<int> a({s.h, s.w});
                std::copy(t.maps[static_cast<std::size_t>(k)].begin(), t.maps[static_cast<std::size_t>(k)].end(), a.mutable_data());
                out.append(a);
            }
            return out;
        })
        .def("flatten", [](const MultiScaleTokenMap& t) { return t.flatten(); });

    py::class_<Tokenizer>(m, "Tokenizer")
        .def(py::init([](const py::dict& cfg) { return Tokenizer(TokenizerConfig::from_json(from_py(cfg))); }), py::arg("config"),
             "Untrained tokenizer; missing config keys take their defaults.")
        .def_static("load", &Tokenizer::load, py::arg("path"))
        .def("save", [](const Tokenizer& t, const std::filesystem::path& p) { t.save(p); }, py::arg("path"))
        .def_property_readonly("codebook", [](const Tokenizer& t) {
            Array a({t.vocab(), t.config().feat_channels});
            std::copy(t.codebook().begin(), t.codebook().end(), a.mutable_data());
            return a;
        })
        .def_property_readonly("vocab", &Tokenizer::vocab)
        .def_property_readonly("schedule", &Tokenizer::schedule)
        .def_property_readonly("config", [](const Tokenizer& t) { return to_py(t.config().to_json()); })
        .def("encode", [](const Tokenizer& t, const Array& img) { return from_features(t.encode(to_image(img))); })
        .def("quantize", [](const Tokenizer& t, const Array& f) { return t.quantize(to_features(f)); })
        .def("tokenize", [](const Tokenizer& t, const Array& img) { return t.quantize(t.encode(to_image(img))); })
        .def("decode", [](const Tokenizer& t, const MultiScaleTokenMap& tokens) { return from_image(t.decode(tokens)); });

    py::class_<NextScaleModel>(m, "Model")
        .def(py::init([](const py::dict& cfg, const Array& codebook) {
                 const std::vector<double> cb(codebook.data(), codebook.data() + codebook.size());
                 return NextScaleModel(NextScaleConfig::from_json(from_py(cfg)), cb);
             }),
             py::arg("config"), py::arg("codebook"))
        .def_static("load", &NextScaleModel::load, py::arg("path"))
        .def("save", [](const NextScaleModel& mdl, const std::filesystem::path& p) { mdl.save(p); }, py::arg("path"))
        .def_property_readonly("n_classes", &NextScaleModel::n_classes)
        .def_property_readonly("schedule", &NextScaleModel::schedule)
        .def_property_readonly("has_unconditional", &NextScaleModel::has_unconditional)
        .def_property_readonly("null_label", &NextScaleModel::null_label)
        .def_property_readonly("config", [](const NextScaleModel& mdl) { return to_py(mdl.config().to_json()); });

    m.def(
        "log_likelihood",
        [](const MultiScaleTokenMap& tokens, int y, const NextScaleModel& model, int k_prime) {
            return k_prime > 0 ? log_likelihood_partial(tokens, y, model, k_prime).total
                               : log_likelihood_full(tokens, y, model).total;
        },
        py::arg("tokens"), py::arg("label"), py::arg("model"), py::arg("k_prime") = 0,
        "log p(tokens | label); k_prime > 0 truncates to the first k_prime scales.");

    m.def(
        "token_log_probs",
        [](const MultiScaleTokenMap& tokens, int y, const NextScaleModel& model) {
            return grids_to_py(token_log_probs(tokens, y, model));
        },
        py::arg("tokens"), py::arg("label"), py::arg("model"));

    m.def(
        "score_labels",
        [](const Array& image, const NextScaleModel& model, const Tokenizer& tok, const py::object& method,
           const std::optional<std::vector<int>>& labels) {
            const auto in = prepare_input(to_image(image), tok);
            return score_labels(in, labels_or_all(labels, model), model, tok, method_from(method));
        },
        py::arg("image"), py::arg("model"), py::arg("tokenizer"), py::arg("method") = "full",
        py::arg("labels") = py::none());

    m.def(
        "classify",
        [](const Array& image, const NextScaleModel& model, const Tokenizer& tok, const py::object& plan,
           const std::optional<std::vector<int>>& labels) {
            const auto ls = labels_or_all(labels, model);
            const auto in = prepare_input(to_image(image), tok);
            const StagePlan p = plan.is_none() ? default_plan(static_cast<int>(ls.size()), model.schedule().num_scales())
                                               : StagePlan::from_json(from_py(plan));
            return classification_dict(classify_adaptive(in, ls, model, tok, p));
        },
        py::arg("image"), py::arg("model"), py::arg("tokenizer"), py::arg("plan") = py::none(), py::arg("labels") = py::none(),
        "Staged classification; the default plan when none is given.");

    m.def(
        "classify_exhaustive",
        [](const Array& image, const NextScaleModel& model, const Tokenizer& tok, const py::object& method,
           const std::optional<std::vector<int>>& labels) {
            const auto in = prepare_input(to_image(image), tok);
            return classification_dict(classify_exhaustive(in, labels_or_all(labels, model), model, tok, method_from(method)));
        },
        py::arg("image"), py::arg("model"), py::arg("tokenizer"), py::arg("method") = "full", py::arg("labels") = py::none());

    m.def(
        "default_plan",
        [](int n_classes, int num_scales) { return to_py(default_plan(n_classes, num_scales).to_json()); },
        py::arg("n_classes"), py::arg("num_scales") = 0);

    m.def("posterior", [](const std::vector<double>& ll, const std::vector<double>& prior) { return posterior(ll, prior); },
          py::arg("log_likelihoods"), py::arg("prior") = std::vector<double>{});

    m.def(
        "token_pmi",
        [](const MultiScaleTokenMap& tokens, int y, const NextScaleModel& model) { return grids_to_py(token_pmi(tokens, y, model).values); },
        py::arg("tokens"), py::arg("label"), py::arg("model"));
    m.def(
        "contrastive_pmi",
        [](const MultiScaleTokenMap& tokens, int a, int b, const NextScaleModel& model) {
            return grids_to_py(contrastive_pmi(tokens, a, b, model).values);
        },
        py::arg("tokens"), py::arg("label_a"), py::arg("label_b"), py::arg("model"));
    m.def(
        "heatmap",
        [](const MultiScaleTokenMap& tokens, int y, const NextScaleModel& model, int height, int width, const std::string& mode) {
            const auto hm = render_heatmap(token_pmi(tokens, y, model), height, width, parse_heatmap_mode(mode));
            Array out({hm.height, hm.width});
            std::copy(hm.values.begin(), hm.values.end(), out.mutable_data());
            return out;
        },
        py::arg("tokens"), py::arg("label"), py::arg("model"), py::arg("height"), py::arg("width"),
        py::arg("mode") = "finest_scale");

    m.def(
        "train_tokenizer",
        [](const std::vector<Array>& images, const py::dict& cfg) {
            std::vector<Image> ims;
            for (const auto& a : images) ims.push_back(to_image(a));
            py::gil_scoped_release release;
            return train_tokenizer(ims, TokenizerConfig::from_json(from_py(cfg)));
        },
        py::arg("images"), py::arg("config"));
    m.def(
        "train_mle",
        [](const std::vector<MultiScaleTokenMap>& tokens, const std::vector<int>& labels, const NextScaleModel& init,
           const py::dict& cfg) {
            if (tokens.size() != labels.size()) throw ShapeError("one label per token map is required");
            std::vector<LabeledTokens> data;
            for (std::size_t i = 0; i < tokens.size(); ++i) data.push_back({tokens[i], labels[i]});
            const auto tc = TrainConfig::from_json(from_py(cfg));
            py::gil_scoped_release release;
            return train_mle(data, init, tc);
        },
        py::arg("tokens"), py::arg("labels"), py::arg("model"), py::arg("config") = py::dict());
    m.def(
        "finetune_cca",
        [](const std::vector<MultiScaleTokenMap>& tokens, const std::vector<int>& labels, const NextScaleModel& base,
           const py::dict& cfg) {
            if (tokens.size() != labels.size()) throw ShapeError("one label per token map is required");
            std::vector<LabeledTokens> data;
            for (std::size_t i = 0; i < tokens.size(); ++i) data.push_back({tokens[i], labels[i]});
            const auto cc = CCAConfig::from_json(from_py(cfg));
            py::gil_scoped_release release;
            return finetune_cca(data, base, cc);
        },
        py::arg("tokens"), py::arg("labels"), py::arg("model"), py::arg("config") = py::dict());

    m.def(
        "topk_accuracy",
        [](const std::vector<std::vector<double>>& scores, const std::vector<int>& labels, int k) {
            return topk_accuracy(scores, labels, k);
        },
        py::arg("scores"), py::arg("labels"), py::arg("k"));
}
