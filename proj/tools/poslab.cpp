#include <CLI11.hpp>

#include <iostream>

#include "poslab/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"grounded poverty-of-stimulus laboratory"};
    app.require_subcommand(1);

    std::string workspace;
    app.add_option("--workspace", workspace,
                   "workspace root (POSLAB_WORKSPACE overrides this flag)");

    poslab::GenOptions gen;
    auto* cgen = app.add_subcommand("gen", "generate the artificial dataset");
    cgen->add_option("--name", gen.name, "dataset name");
    cgen->add_option("--seed", gen.seed, "split/render seed");
    cgen->add_option("--canvas", gen.canvas, "canvas size in pixels");
    cgen->add_option("--train", gen.train, "training pairs (ambiguous)");
    cgen->add_option("--val", gen.validation, "validation pairs (ambiguous)");
    cgen->add_option("--test", gen.test, "test pairs (disambiguating)");
    cgen->add_option("--rate", gen.rate, "dataset default injection rate");
    cgen->add_option("--max-rate", gen.max_rate, "largest rate the pool supports");
    cgen->add_option("--margin", gen.margin, "canvas margin fraction");
    cgen->add_option("--small-fraction", gen.small_fraction, "small object size fraction");
    cgen->add_flag("--force", gen.force, "overwrite an existing dataset");

    poslab::IngestOptions ing;
    auto* cing = app.add_subcommand("ingest", "load a pre-annotated caption corpus");
    cing->add_option("--corpus", ing.corpus, "records file (jsonl)")->required();
    cing->add_option("--name", ing.name, "dataset name");
    cing->add_option("--seed", ing.seed, "split seed");
    cing->add_option("--train", ing.train, "training records (0 = all remaining)");
    cing->add_option("--val", ing.validation, "validation records");
    cing->add_option("--test", ing.test, "test records (0 = all disambiguating)");
    cing->add_option("--rate", ing.rate, "injection rate bookkeeping value");
    cing->add_flag("--force", ing.force, "overwrite an existing dataset");

    poslab::TrainOptions tr;
    auto* ctr = app.add_subcommand("train", "run the injection-rate sweep");
    ctr->add_option("--config", tr.config_file, "experiment config file (overrides flags)");
    ctr->add_option("--dataset", tr.dataset, "dataset name or path");
    ctr->add_option("--rates", tr.rates, "injection rates")->delimiter(',');
    ctr->add_option("--arms", tr.arms, "arms: vision,novision,shuffled")->delimiter(',');
    ctr->add_option("--seeds", tr.seeds, "run seeds")->delimiter(',');
    ctr->add_option("--eval-steps", tr.eval_steps, "evaluation checkpoints")->delimiter(',');
    ctr->add_option("--steps", tr.max_steps, "parameter updates per run");
    ctr->add_option("--batch", tr.batch_size, "batch size");
    ctr->add_option("--lr", tr.lr, "peak learning rate");
    ctr->add_option("--noise-prob", tr.noise_replace_prob, "white-noise replacement probability");
    ctr->add_option("--train-size", tr.train_size, "use only the first N training items");
    ctr->add_option("--jobs", tr.jobs, "parallel runs");
    ctr->add_option("--d-model", tr.d_model, "model width");
    ctr->add_option("--heads", tr.n_heads, "attention heads");
    ctr->add_option("--enc-layers", tr.encoder_layers, "encoder layers");
    ctr->add_option("--dec-layers", tr.decoder_layers, "decoder layers");
    ctr->add_option("--patch", tr.patch_size, "patch size");
    ctr->add_option("--caption-len", tr.max_caption_len, "max caption length");
    ctr->add_option("--canvas", tr.canvas, "canvas size");

    poslab::ReportOptions rep;
    auto* crep = app.add_subcommand("report", "aggregate runs into tables and plots");

    auto* cchk = app.add_subcommand("check", "run the gradient/metric self-tests");

    CLI11_PARSE(app, argc, argv);

    gen.workspace = workspace;
    ing.workspace = workspace;
    tr.workspace = workspace;
    rep.workspace = workspace;

    if (cgen->parsed()) return poslab::cmd_gen(gen, std::cout, std::cerr);
    if (cing->parsed()) return poslab::cmd_ingest(ing, std::cout, std::cerr);
    if (ctr->parsed()) return poslab::cmd_train(tr, std::cout, std::cerr);
    if (crep->parsed()) return poslab::cmd_report(rep, std::cout, std::cerr);
    if (cchk->parsed()) return poslab::cmd_check(std::cout);
    return 1;
}
