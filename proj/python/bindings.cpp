// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Python bindings: configuration, data generation, the three training
// phases, evaluation, probes and surgery. Models are opaque handles;
// matrices cross the boundary as float64 NumPy arrays.

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <string>
#include <vector>

#include "nkb/checkpoint.hpp"
#include "nkb/config.hpp"
#include "nkb/errors.hpp"
#include "nkb/pipeline.hpp"

namespace py = pybind11;
using namespace nkb;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const Tensor& t) {
  Array out({t.rows(), t.cols()});
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

Tensor from_array(const Array& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D array");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return Tensor::matrix(r, c, std::vector<double>(a.data(), a.data() + r * c));
}

RunConfig make_config(const std::string& path, const std::map<std::string, std::string>& overrides) {
  ConfigMap map;
  if (!path.empty()) map = parse_config_file(path);
  for (const auto& [k, v] : overrides) map[k] = v;
  return RunConfig::from_map(map);
}

py::dict train_result(const TrainResult& r) {
  py::dict d;
  d["initial_loss"] = r.initial_loss;
  d["final_loss"] = r.final_loss;
  d["steps"] = r.steps;
  return d;
}

py::dict em_dict(const EmResult& r) {
  py::dict d;
  d["em"] = r.em;
  d["correct"] = r.correct;
  d["total"] = r.total;
  d["predictions"] = r.predictions;
  return d;
}

std::vector<std::pair<std::string, std::string>> qa_strings(const std::vector<QAPair>& qa) {
  std::vector<std::pair<std::string, std::string>> out;
  out.reserve(qa.size());
  for (const auto& q : qa) out.emplace_back(join_tokens(q.question), join_tokens(q.answer));
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Neural knowledge bank lab: C++ core";
  m.attr("__version__") = kArtifactVersion;

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

  py::class_<RunConfig>(m, "Config")
      .def(py::init(&make_config), py::arg("path") = "",
           py::arg("overrides") = std::map<std::string, std::string>{},
           "Defaults, then the file (if any), then the overrides.")
      .def_readonly("seed", &RunConfig::seed)
      .def("to_text", &RunConfig::to_text)
      .def("__repr__", [](const RunConfig& c) { return "<Config seed=" + std::to_string(c.seed) + ">"; });

  py::class_<Dataset>(m, "Dataset")
      .def_property_readonly("vocab", [](const Dataset& d) { return d.vocab.tokens(); })
      .def_property_readonly("qa_base", [](const Dataset& d) { return qa_strings(d.qa_base); })
      .def_property_readonly("qa_new", [](const Dataset& d) { return qa_strings(d.qa_new); })
      .def_property_readonly("qa_withheld", [](const Dataset& d) { return qa_strings(d.qa_withheld); })
      .def_property_readonly("ssm_new_size", [](const Dataset& d) { return d.ssm_new.size(); })
      .def_property_readonly("ssm_base_size", [](const Dataset& d) { return d.ssm_base.size(); })
      .def("world_text", [](const Dataset& d) { return d.world.to_text(); });

  m.def("generate_dataset", &generate_dataset, py::arg("config"));
  m.def("write_dataset", &write_dataset, py::arg("dir"), py::arg("dataset"));
  m.def("read_dataset", &read_dataset, py::arg("dir"));

  py::class_<Seq2SeqModel>(m, "Model")
      .def_property_readonly("has_nkb", &Seq2SeqModel::has_nkb)
      .def_property_readonly("parameter_count", &Seq2SeqModel::parameter_count)
      .def_property_readonly("parameter_names",
                             [](const Seq2SeqModel& s) {
                               std::vector<std::string> names;
                               for (const auto& p : s.parameters()) names.push_back(p.name);
                               return names;
                             })
      .def("parameter", [](const Seq2SeqModel& s, const std::string& name) {
        return to_array(s.parameter(name));
      })
      .def("nkb_keys", [](const Seq2SeqModel& s) { return to_array(s.nkb().w1); })
      .def("nkb_values", [](const Seq2SeqModel& s) { return to_array(s.nkb().w2); })
      .def("clone", &Seq2SeqModel::clone)
      .def("digests", &parameter_digests)
      .def("save", [](const Seq2SeqModel& s, const std::string& path) {
        save_checkpoint_file(path, make_checkpoint(s));
      })
      .def("answer",
           [](const Seq2SeqModel& s, const std::string& question, const Dataset& d, std::size_t max_len) {
             const auto src = encode_source(split_tokens(question), d.vocab);
             return join_tokens(d.vocab.decode(greedy_decode(s, src, max_len).tokens));
           },
           py::arg("question"), py::arg("dataset"), py::arg("max_len") = 8);

  m.def("load_model", [](const std::string& path) { return restore_model(load_checkpoint_file(path)); });
  m.def("new_base_model", &new_base_model, py::arg("config"), py::arg("dataset"));
  m.def("mount_nkb", &ensure_mounted, py::arg("model"), py::arg("config"));

  m.def("pretrain",
        [](Seq2SeqModel& model, const RunConfig& c, const Dataset& d) {
          TrainResult r;
          {
            py::gil_scoped_release release;
            r = pretrain_base(model, pretrain_examples(c, d), c.pretrain);
          }
          return train_result(r);
        },
        py::arg("model"), py::arg("config"), py::arg("dataset"));
  m.def("inject",
        [](Seq2SeqModel& model, const RunConfig& c, const Dataset& d) {
          TrainResult r;
          {
            py::gil_scoped_release release;
            r = inject_knowledge(model, inject_examples(c, d), c.inject);
          }
          return train_result(r);
        },
        py::arg("model"), py::arg("config"), py::arg("dataset"));
  m.def("finetune",
        [](Seq2SeqModel& model, const RunConfig& c, const Dataset& d) {
          TrainResult r;
          {
            py::gil_scoped_release release;
            r = finetune(model, finetune_examples(c, d), c.finetune);
          }
          return train_result(r);
        },
        py::arg("model"), py::arg("config"), py::arg("dataset"));

  m.def("evaluate",
        [](const Seq2SeqModel& model, const RunConfig& c, const Dataset& d, std::size_t threads) {
          const EvalReport r = run_eval(model, c, d, threads);
          py::dict out;
          out["base"] = em_dict(r.base);
          out["new"] = em_dict(r.fresh);
          return out;
        },
        py::arg("model"), py::arg("config"), py::arg("dataset"), py::arg("threads") = 1);

  m.def("ffn_forward",
        [](const Array& h, const Array& w1, const Array& w2, const std::string& act) {
          return to_array(ffn_forward(from_array(h), FfnParams{from_array(w1), from_array(w2)},
                                      activation_from_string(act)));
        },
        py::arg("h"), py::arg("w1"), py::arg("w2"), py::arg("activation") = "relu",
        "Dense FFN: act(H W1^T) W2.");
  m.def("ffn_memory_forward",
        [](const std::vector<double>& h, const Array& w1, const Array& w2, const std::string& act) {
          const auto r = ffn_memory_forward(h, FfnParams{from_array(w1), from_array(w2)},
                                            activation_from_string(act));
          return py::make_tuple(r.output, r.weights);
        },
        py::arg("h"), py::arg("w1"), py::arg("w2"), py::arg("activation") = "relu",
        "Slot-by-slot memory reading of the FFN; returns (output, slot weights).");

  m.def("project_value",
        [](const Seq2SeqModel& model, std::size_t slot) {
          const auto& w2 = model.nkb().w2;
          if (slot >= w2.rows()) throw ContractError("slot out of range");
          return project_value(w2.values().subspan(slot * w2.cols(), w2.cols()), model.embedding());
        },
        py::arg("model"), py::arg("slot"), "Softmax(E v) for one NKB value vector.");

  m.def("value_probe",
        [](const Seq2SeqModel& model, const RunConfig& c, const Dataset& d, std::size_t threads) {
          const ValueProbe p = run_value_probe(model, c, d, threads);
          py::list slots;
          for (const auto& r : p.reports) {
            py::dict s;
            s["slot"] = r.slot;
            s["category"] = to_string(r.category);
            py::list top;
            for (const auto& t : r.top) top.append(py::make_tuple(t.surface, t.prob));
            s["top"] = top;
            slots.append(s);
          }
          py::dict out;
          out["slots"] = slots;
          out["entity_fraction"] = p.entity_fraction;
          return out;
        },
        py::arg("model"), py::arg("config"), py::arg("dataset"), py::arg("threads") = 1);

  m.def("key_probe",
        [](const Seq2SeqModel& model, const RunConfig& c, const Dataset& d, std::size_t threads) {
          const KeyProbe p = run_key_probe(model, c, d, threads);
          py::dict out;
          out["active"] = p.active;
          out["cohesion"] = p.cohesion;
          out["shuffled_cohesion"] = p.shuffled_cohesion;
          py::list keys;
          for (const auto& r : p.reports) {
            py::list top;
            for (const auto& t : r.top) top.append(py::make_tuple(join_tokens(p.questions[t.question].question), t.weight));
            keys.append(py::make_tuple(r.key, top));
          }
          out["keys"] = keys;
          return out;
        },
        py::arg("model"), py::arg("config"), py::arg("dataset"), py::arg("threads") = 1);

  m.def("apply_surgery",
        [](Seq2SeqModel& model, std::size_t slot, double lambda, const std::string& original,
           const std::string& target, const Dataset& d) {
          apply_surgery(model, SurgeryOp{slot, lambda, d.vocab.id(original), d.vocab.id(target)});
        },
        py::arg("model"), py::arg("slot"), py::arg("lam"), py::arg("original"), py::arg("target"),
        py::arg("dataset"), "v_slot += lam * (e_target - e_original), in place.");
  m.def("changed_value_rows",
        [](const Seq2SeqModel& before, const Seq2SeqModel& after) {
          const LocalityReport r = locality_check(before, after);
          return py::make_tuple(r.changed_value_rows, r.other_changes);
        },
        py::arg("before"), py::arg("after"));

  m.def("sweep",
        [](const Seq2SeqModel& model, const RunConfig& c, const Dataset& d, std::size_t threads) {
          const SweepResult r = run_sweep(model, c, d, threads);
          py::list rows;
          for (const auto& row : r.rows) {
            py::dict x;
            x["lambda"] = row.lambda;
            x["success_rate"] = row.success_rate;
            x["destruction_rate"] = row.destruction_rate;
            x["edits"] = row.edits;
            x["locality_failures"] = row.locality_failures;
            rows.append(x);
          }
          return rows;
        },
        py::arg("model"), py::arg("config"), py::arg("dataset"), py::arg("threads") = 1);
}
