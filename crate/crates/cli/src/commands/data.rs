use super::{input, load_docs, load_vocab, record_input, Ctx, TaskArg};
use crate::args::{BuildVocabArgs, CorruptArgs, MineSsmArgs};
use crate::error::{config, CliError};
use crate::manifest::beside;
use anyhow::Context;
use cbqa_core::jsonl::write_lines;
use cbqa_core::rng::mix;
use cbqa_core::salient::{
    mask_salient, parse_annotated_spans, AnnotatedTagger, MiningConfig, RuleTagger, SalientTagger, SentenceMiner,
};
use cbqa_core::span_corruption::{corrupt as corrupt_tokens, CorruptionConfig, PairRecord};
use cbqa_core::tokenizer::DEFAULT_SENTINELS;
use cbqa_core::Vocab;
use serde_json::json;
use std::path::Path;

pub fn build_vocab(ctx: &Ctx, a: BuildVocabArgs) -> Result<(), CliError> {
    let mut s = ctx.settings("build-vocab")?;
    let size: usize = s.get("size", a.size, ctx.pick(1000, 32_100))?;
    let sentinels: usize = s.get("sentinels", a.sentinels, DEFAULT_SENTINELS)?;
    s.finish()?;
    let minimum = 258 + sentinels;
    if size < minimum {
        return Err(config(format!("--size {size} is below the minimum {minimum} for {sentinels} sentinels")));
    }
    let corpora = a.corpus.iter().map(|p| input(p)).collect::<Result<Vec<_>, _>>()?;
    let qa = a.qa.iter().map(|q| TaskArg::parse(q)).collect::<Result<Vec<_>, _>>()?;
    let qa_paths = qa.iter().map(|t| input(&t.path)).collect::<Result<Vec<_>, _>>()?;

    let mut m = ctx.manifest("build-vocab", None, json!({ "size": size, "sentinels": sentinels }))?;
    for (given, resolved) in a.corpus.iter().zip(&corpora) {
        record_input(&mut m, given, resolved)?;
    }
    for (t, resolved) in qa.iter().zip(&qa_paths) {
        record_input(&mut m, &t.path, resolved)?;
    }
    m.artifact(&a.out);
    m.write(&beside(&a.out))?;

    let mut texts = Vec::new();
    for p in &corpora {
        texts.extend(load_docs(p)?.into_iter().map(|d| d.text));
    }
    for (t, p) in qa.iter().zip(&qa_paths) {
        for ex in super::load_qa(p, t.task)? {
            texts.extend(ex.all_answers().map(str::to_string));
            texts.push(ex.question);
        }
    }
    let vocab = Vocab::build(&texts, size, sentinels).context("building vocabulary")?;
    vocab.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{}", json!({ "vocab_size": vocab.len(), "merges": vocab.pieces().len() - 256 }));
    Ok(())
}

pub fn corrupt(ctx: &Ctx, a: CorruptArgs) -> Result<(), CliError> {
    let mut s = ctx.settings("corrupt")?;
    let mask_rate: f64 = s.get("mask_rate", a.mask_rate, 0.15)?;
    let chunk_len: usize = s.get("chunk_len", a.chunk_len, ctx.pick(96, 512))?;
    let seed: u64 = s.get("seed", a.seed, 0)?;
    s.finish()?;
    let cfg = CorruptionConfig { mask_rate, seed };
    cfg.validate().map_err(config)?;
    if chunk_len == 0 {
        return Err(config("--chunk-len must be positive"));
    }
    let corpus = input(&a.corpus)?;
    let vocab_path = input(&a.vocab)?;

    let mut m = ctx.manifest("corrupt", Some(seed), json!({ "mask_rate": mask_rate, "chunk_len": chunk_len }))?;
    record_input(&mut m, &a.corpus, &corpus)?;
    record_input(&mut m, &a.vocab, &vocab_path)?;
    m.artifact(&a.out);
    m.write(&beside(&a.out))?;

    let vocab = load_vocab(&vocab_path)?;
    let mut rows = Vec::new();
    let mut key = 0u64;
    for doc in load_docs(&corpus)? {
        let ids = vocab.encode(&doc.text);
        for (i, chunk) in ids.chunks(chunk_len).enumerate() {
            let pair = corrupt_tokens(&vocab, chunk, &cfg, key).with_context(|| format!("document {}", doc.doc_id))?;
            rows.push(PairRecord::new(pair, format!("{}#{i}", doc.doc_id)));
            key += 1;
        }
    }
    write_lines(&a.out, &rows).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{}", json!({ "pairs": rows.len() }));
    Ok(())
}

pub fn annotated_tagger(path: &Path) -> anyhow::Result<AnnotatedTagger> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let tagged = parse_annotated_spans(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(AnnotatedTagger::new(tagged.into_iter().map(|t| (t.sentence.text, t.spans))))
}

pub fn mine_ssm(ctx: &Ctx, a: MineSsmArgs) -> Result<(), CliError> {
    let mut s = ctx.settings("mine-ssm")?;
    let min_len: Option<usize> = s.get_opt("min_len", a.min_len)?;
    let max_len: Option<usize> = s.get_opt("max_len", a.max_len)?;
    let seed: u64 = s.get("seed", a.seed, 0)?;
    s.finish()?;
    if let (Some(lo), Some(hi)) = (min_len, max_len) {
        if lo > hi {
            return Err(config(format!("--min-len {lo} exceeds --max-len {hi}")));
        }
    }
    let corpus = input(&a.corpus)?;
    let vocab_path = input(&a.vocab)?;
    let spans = a.spans.as_deref().map(input).transpose()?;

    let tagger_name = if spans.is_some() { "annotated" } else { "rule" };
    let mut m = ctx.manifest(
        "mine-ssm",
        Some(seed),
        json!({ "min_len": min_len, "max_len": max_len, "tagger": tagger_name }),
    )?;
    record_input(&mut m, &a.corpus, &corpus)?;
    record_input(&mut m, &a.vocab, &vocab_path)?;
    if let (Some(given), Some(resolved)) = (&a.spans, &spans) {
        record_input(&mut m, given, resolved)?;
    }
    m.artifact(&a.out);
    m.write(&beside(&a.out))?;

    let vocab = load_vocab(&vocab_path)?;
    let tagger: Box<dyn SalientTagger> = match &spans {
        Some(p) => Box::new(annotated_tagger(p)?),
        None => Box::new(RuleTagger),
    };
    let docs = load_docs(&corpus)?;
    let mut miner = SentenceMiner::new(docs.into_iter(), tagger.as_ref(), MiningConfig { min_len, max_len });
    let mut rows = Vec::new();
    for (i, tagged) in miner.by_ref().enumerate() {
        let tagged = tagged.context("mining sentences")?;
        let pair = mask_salient(&tagged, &vocab, mix(seed, i as u64)).context("masking sentence")?;
        let origin = format!("{}:{}", tagged.sentence.doc_id, tagged.sentence.index);
        rows.push(PairRecord::new(pair, origin));
    }
    write_lines(&a.out, &rows).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{}", serde_json::to_string(&miner.stats()).map_err(anyhow::Error::from)?);
    Ok(())
}
