#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "hiercon/dataset.hpp"
#include "hiercon/eval.hpp"
#include "hiercon/losses.hpp"
#include "hiercon/network.hpp"
#include "hiercon/pipeline.hpp"
#include "hiercon/taxonomy.hpp"

namespace py = pybind11;
using namespace hiercon;

namespace {

Matrix matrix_from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
  if (arr.ndim() != 2) throw ShapeMismatch("expected a 2-D array");
  Matrix m(static_cast<std::size_t>(arr.shape(0)), static_cast<std::size_t>(arr.shape(1)));
  std::copy(arr.data(), arr.data() + arr.size(), m.data.begin());
  return m;
}

py::array_t<double> numpy_from_matrix(const Matrix& m) {
  py::array_t<double> arr({m.rows, m.cols});
  std::copy(m.data.begin(), m.data.end(), arr.mutable_data());
  return arr;
}

std::vector<Matrix> matrices_from_list(const py::sequence& seq) {
  std::vector<Matrix> out;
  for (const auto& item : seq) {
    out.push_back(matrix_from_numpy(py::cast<py::array_t<double>>(item)));
  }
  return out;
}

py::list list_from_matrices(const std::vector<Matrix>& ms) {
  py::list out;
  for (const auto& m : ms) out.append(numpy_from_matrix(m));
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Hierarchy-preserving contrastive embeddings with kNN evaluation";

  py::register_exception<Error>(m, "HierconError", PyExc_RuntimeError);

  py::enum_<Level>(m, "Level")
      .value("individual", Level::individual)
      .value("species", Level::species)
      .value("taxon", Level::taxon);

  py::class_<LabelTriple>(m, "LabelTriple")
      .def(py::init<std::string, std::string, std::string>(), py::arg("individual"),
           py::arg("species"), py::arg("taxon"))
      .def(py::init([](const py::tuple& t) {
        if (t.size() != 3) throw ShapeMismatch("label triple needs 3 entries");
        return LabelTriple{t[0].cast<std::string>(), t[1].cast<std::string>(),
                           t[2].cast<std::string>()};
      }))
      .def_readwrite("individual", &LabelTriple::individual)
      .def_readwrite("species", &LabelTriple::species)
      .def_readwrite("taxon", &LabelTriple::taxon)
      .def("__repr__", [](const LabelTriple& t) {
        return "LabelTriple(" + t.individual + ", " + t.species + ", " + t.taxon + ")";
      });
  py::implicitly_convertible<py::tuple, LabelTriple>();

  py::class_<ConsistencyReport>(m, "ConsistencyReport")
      .def_readonly("species_id_errors", &ConsistencyReport::species_id_errors)
      .def_readonly("taxon_species_errors", &ConsistencyReport::taxon_species_errors)
      .def_readonly("total_predictions", &ConsistencyReport::total_predictions);

  py::class_<Taxonomy>(m, "Taxonomy")
      .def("classes", &Taxonomy::classes, py::arg("level"))
      .def("num_classes", &Taxonomy::num_classes, py::arg("level"))
      .def("has_label", &Taxonomy::has_label, py::arg("level"), py::arg("label"))
      .def("parent", &Taxonomy::parent, py::arg("level"), py::arg("label"));

  m.def("build_taxonomy", &build_taxonomy, py::arg("triples"));
  m.def("ancestors", &ancestors, py::arg("taxonomy"), py::arg("individual"));
  m.def(
      "positive_mask",
      [](const Taxonomy& tax, const std::vector<LabelTriple>& labels, Level level) {
        const PairMask mask = positive_mask(tax, labels, level);
        py::array_t<bool> arr({mask.size(), mask.size()});
        auto* data = arr.mutable_data();
        for (std::size_t i = 0; i < mask.size(); ++i) {
          for (std::size_t j = 0; j < mask.size(); ++j) {
            data[i * mask.size() + j] = mask(i, j);
          }
        }
        return arr;
      },
      py::arg("taxonomy"), py::arg("batch_labels"), py::arg("level"));
  m.def("check_consistency", &check_consistency, py::arg("taxonomy"),
        py::arg("predictions"));

  py::enum_<Split>(m, "Split")
      .value("train", Split::train)
      .value("val", Split::val)
      .value("test", Split::test)
      .value("unseen", Split::unseen);

  py::class_<EmbeddingRecord>(m, "EmbeddingRecord")
      .def_readonly("key", &EmbeddingRecord::key)
      .def_readonly("features", &EmbeddingRecord::features)
      .def_readonly("label", &EmbeddingRecord::label)
      .def_readonly("split", &EmbeddingRecord::split);

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("records", &Dataset::records)
      .def_readonly("dim", &Dataset::dim)
      .def_readonly("taxonomy", &Dataset::taxonomy)
      .def("split_indices", &Dataset::split_indices, py::arg("split"))
      .def("__len__", [](const Dataset& ds) { return ds.records.size(); });

  py::class_<SynthConfig>(m, "SynthConfig")
      .def(py::init<>())
      .def_readwrite("n_taxa", &SynthConfig::n_taxa)
      .def_readwrite("species_per_taxon", &SynthConfig::species_per_taxon)
      .def_readwrite("ids_per_species", &SynthConfig::ids_per_species)
      .def_readwrite("samples_per_id", &SynthConfig::samples_per_id)
      .def_readwrite("unseen_ids_per_species", &SynthConfig::unseen_ids_per_species)
      .def_readwrite("dim", &SynthConfig::dim)
      .def_readwrite("spread_taxon", &SynthConfig::spread_taxon)
      .def_readwrite("spread_species", &SynthConfig::spread_species)
      .def_readwrite("spread_id", &SynthConfig::spread_id)
      .def_readwrite("noise", &SynthConfig::noise)
      .def_readwrite("seed", &SynthConfig::seed);

  py::enum_<FileFormat>(m, "FileFormat")
      .value("auto_detect", FileFormat::auto_detect)
      .value("csv", FileFormat::csv)
      .value("jsonl", FileFormat::jsonl);

  m.def("load_dataset", &load_dataset, py::arg("path"),
        py::arg("format") = FileFormat::auto_detect);
  m.def("save_dataset", &save_dataset, py::arg("dataset"), py::arg("path"),
        py::arg("format") = FileFormat::auto_detect);
  m.def("generate_synthetic", &generate_synthetic, py::arg("config"));

  py::enum_<Activation>(m, "Activation")
      .value("relu", Activation::relu)
      .value("identity", Activation::identity);

  py::class_<ArchConfig>(m, "ArchConfig")
      .def(py::init<>())
      .def_readwrite("input_dim", &ArchConfig::input_dim)
      .def_readwrite("adapter_hidden", &ArchConfig::adapter_hidden)
      .def_readwrite("shared_dim", &ArchConfig::shared_dim)
      .def_readwrite("projector_hidden", &ArchConfig::projector_hidden)
      .def_readwrite("projector_out", &ArchConfig::projector_out)
      .def_readwrite("activation", &ArchConfig::activation);

  py::class_<EncoderParams>(m, "EncoderParams")
      .def_readonly("levels", &EncoderParams::levels);

  m.def("init_params", &init_params, py::arg("config"), py::arg("seed"),
        py::arg("levels") = std::vector<Level>{Level::individual, Level::species,
                                               Level::taxon});
  m.def(
      "forward_shared",
      [](const EncoderParams& params, const py::array_t<double>& features) {
        return numpy_from_matrix(forward_shared(params, matrix_from_numpy(features)).first);
      },
      py::arg("params"), py::arg("features"));
  m.def(
      "forward_projector",
      [](const EncoderParams& params, Level level, const py::array_t<double>& shared) {
        return numpy_from_matrix(
            forward_projector(params, level, matrix_from_numpy(shared)).first);
      },
      py::arg("params"), py::arg("level"), py::arg("shared"));
  m.def("save_checkpoint", &save_checkpoint, py::arg("params"), py::arg("config"),
        py::arg("path"));
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

  py::enum_<LossVariant>(m, "LossVariant")
      .value("supcon", LossVariant::supcon)
      .value("himulcon", LossVariant::himulcon)
      .value("himulcone", LossVariant::himulcone);

  py::class_<LossConfig>(m, "LossConfig")
      .def(py::init<>())
      .def_readwrite("variant", &LossConfig::variant)
      .def_readwrite("tau", &LossConfig::tau)
      .def_readwrite("lambdas", &LossConfig::lambdas);

  py::class_<LossResult>(m, "LossResult")
      .def_readonly("total", &LossResult::total)
      .def_readonly("per_level", &LossResult::per_level)
      .def_readonly("per_pair_max", &LossResult::per_pair_max)
      .def_property_readonly("grad_wrt_z", [](const LossResult& r) {
        return list_from_matrices(r.grad_wrt_z);
      });

  m.def(
      "pair_loss",
      [](const py::array_t<double>& z, std::size_t i, std::size_t p, double tau) {
        return pair_loss(matrix_from_numpy(z), i, p, tau);
      },
      py::arg("z"), py::arg("i"), py::arg("p"), py::arg("tau"));
  m.def(
      "supcon",
      [](const py::array_t<double>& z, const std::vector<std::string>& labels,
         double tau) { return supcon(matrix_from_numpy(z), labels, tau); },
      py::arg("z"), py::arg("labels"), py::arg("tau"));
  m.def(
      "himulcon",
      [](const py::sequence& z, const std::vector<LabelTriple>& labels,
         const Taxonomy& tax, const LossConfig& cfg) {
        return himulcon(matrices_from_list(z), labels, tax, cfg);
      },
      py::arg("z_per_level"), py::arg("labels"), py::arg("taxonomy"), py::arg("config"));
  m.def(
      "himulcone",
      [](const py::sequence& z, const std::vector<LabelTriple>& labels,
         const Taxonomy& tax, const LossConfig& cfg) {
        return himulcone(matrices_from_list(z), labels, tax, cfg);
      },
      py::arg("z_per_level"), py::arg("labels"), py::arg("taxonomy"), py::arg("config"));
  m.def(
      "grad_check",
      [](const py::sequence& z, const std::vector<LabelTriple>& labels,
         const Taxonomy& tax, const LossConfig& cfg, double step) {
        return grad_check(matrices_from_list(z), labels, tax, cfg, step);
      },
      py::arg("z_per_level"), py::arg("labels"), py::arg("taxonomy"), py::arg("config"),
      py::arg("step") = 1e-5);

  py::enum_<Metric>(m, "Metric")
      .value("cosine", Metric::cosine)
      .value("euclidean", Metric::euclidean);

  py::class_<SpeciesBreakdown>(m, "SpeciesBreakdown")
      .def_readonly("species", &SpeciesBreakdown::species)
      .def_readonly("species_accuracy", &SpeciesBreakdown::species_accuracy)
      .def_readonly("id_accuracy", &SpeciesBreakdown::id_accuracy)
      .def_readonly("n_queries", &SpeciesBreakdown::n_queries);

  py::class_<EvalReport>(m, "EvalReport")
      .def_property_readonly("balanced_accuracy",
                             [](const EvalReport& r) {
                               py::dict d;
                               d["taxon"] = r.balanced_accuracy[2];
                               d["species"] = r.balanced_accuracy[1];
                               d["id"] = r.balanced_accuracy[0];
                               return d;
                             })
      .def_readonly("per_species", &EvalReport::per_species)
      .def_readonly("consistency", &EvalReport::consistency)
      .def_readonly("k", &EvalReport::k)
      .def_readonly("metric", &EvalReport::metric)
      .def_readonly("episodes", &EvalReport::episodes)
      .def("to_json", &report_to_json)
      .def("to_table", &report_to_table);

  m.def("balanced_accuracy", &balanced_accuracy, py::arg("preds"), py::arg("truths"));
  m.def("evaluate_closed", &evaluate_closed, py::arg("params"), py::arg("dataset"),
        py::arg("split"), py::arg("k") = 1, py::arg("metric") = Metric::cosine);
  m.def("evaluate_closed_raw", &evaluate_closed_raw, py::arg("dataset"),
        py::arg("split"), py::arg("k") = 1, py::arg("metric") = Metric::cosine);
  m.def("evaluate_unseen_nn", &evaluate_unseen_nn, py::arg("params"), py::arg("dataset"),
        py::arg("k") = 1, py::arg("metric") = Metric::cosine);
  m.def("one_shot_episodes", &one_shot_episodes, py::arg("params"), py::arg("dataset"),
        py::arg("episodes") = 10, py::arg("k") = 1, py::arg("metric") = Metric::cosine,
        py::arg("seed") = 0);

  py::class_<EpochStats>(m, "EpochStats")
      .def_readonly("train_loss", &EpochStats::train_loss)
      .def_readonly("per_level_loss", &EpochStats::per_level_loss)
      .def_property_readonly("val_balanced_accuracy", [](const EpochStats& s) {
        py::dict d;
        d["taxon"] = s.val_balanced_accuracy[2];
        d["species"] = s.val_balanced_accuracy[1];
        d["id"] = s.val_balanced_accuracy[0];
        return d;
      });

  py::class_<TrainHistory>(m, "TrainHistory")
      .def_readonly("epochs", &TrainHistory::epochs)
      .def_readonly("best_epoch", &TrainHistory::best_epoch)
      .def("to_json", &history_to_json);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("arch", &TrainConfig::arch)
      .def_readwrite("loss", &TrainConfig::loss)
      .def_readwrite("levels", &TrainConfig::levels)
      .def_readwrite("lr", &TrainConfig::lr)
      .def_readwrite("weight_decay", &TrainConfig::weight_decay)
      .def_readwrite("beta1", &TrainConfig::beta1)
      .def_readwrite("beta2", &TrainConfig::beta2)
      .def_readwrite("eps", &TrainConfig::eps)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("augment_sigma", &TrainConfig::augment_sigma)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("validation_k", &TrainConfig::validation_k)
      .def_readwrite("metric", &TrainConfig::metric)
      .def_readonly("preset", &TrainConfig::preset);

  m.def("preset_config", &preset_config, py::arg("name"));
  m.def("preset_names", &preset_names);
  m.def(
      "train",
      [](const TrainConfig& cfg, const Dataset& ds) {
        TrainOutcome outcome = train(cfg, ds);
        return py::make_tuple(std::move(outcome.params), std::move(outcome.history));
      },
      py::arg("config"), py::arg("dataset"));
  m.def(
      "run_gradcheck",
      [](std::uint64_t seed) {
        const GradCheckReport report = run_gradcheck_suite(seed);
        py::dict out;
        for (const auto& entry : report.entries) {
          out[py::str(entry.name)] = entry.max_rel_err;
        }
        return out;
      },
      py::arg("seed") = 7);
  m.def("cli_main", [](const std::vector<std::string>& args) {
    std::vector<std::string> argv_storage = args;
    argv_storage.insert(argv_storage.begin(), "hiercon");
    std::vector<char*> argv;
    for (auto& s : argv_storage) argv.push_back(s.data());
    return cli_main(static_cast<int>(argv.size()), argv.data());
  });
}
