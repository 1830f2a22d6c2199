use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use candle_core::DType;
use image::RgbImage;
use serde_json::{json, Value};

use super::manifest::{
    ConditionColumn, EntityColumn, ManifestRow, SubjectColumn, RULE_ENTITY_VERIFIED,
    RULE_FACE_FREE, RULE_IMAGE_AVAILABLE, RULE_IMAGE_QUALITY,
};
use super::{file_stem, resolve_image, Pipeline, Stage, SUBSET_ENTITY, SUBSET_NON_ENTITY};
use crate::conditioning::{
    build_weight_vector, scale_exponent_to_beta, subject_conditioning, EmbeddingCache,
};
use crate::corpus::{
    assign_splits, cluster_categories, compute_corpus_stats, filter_caption, tag_entities,
    CaptionRecord, GazetteerNer, NerBackend, Split, Verdict, RULE_EXCLUDED_ENTITIES,
    RULE_MIN_WORDS,
};
use crate::eval::{
    build_report, entity_metrics, face_aware_view, frechet_distance, score_alignment,
    validate_report, FeatureSet, SeedRun,
};
use crate::generation::{
    batch_generate, image_file_name, install_checkpoint, BatchItem, GenerationBackend,
    PROVENANCE_FILE,
};
use crate::grounding::{
    build_entity_subset, build_profile, crop_around_face, link_mentions, verify_entity_in_image,
    AliasLinker, EntityProfile, KnowledgeSnapshot, ProfileRepository, VerifiedPair,
};
use crate::imaging::curate_image;
use crate::subjects::{
    read_sidecar, write_sidecar, HttpChatClient, LlmClient, PromptTemplate, RecordedLlmClient,
    ResponseCache, RetryPolicy, RewriteRecord, SubjectExtractor,
};
use crate::trainer::{run_training, TrainSample};
use crate::zoo::{registry, TextEncoder};
use crate::{Error, Result};

fn required<'a>(value: &'a Option<PathBuf>, key: &str, stage: Stage) -> Result<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| Error::Config(vec![format!("{key}: required by {stage}")]))
}

/// External files a stage reads, for the ledger input hash.
pub(super) fn external_inputs(p: &Pipeline, stage: Stage) -> Result<Vec<(String, PathBuf)>> {
    let cfg = &p.config;
    let mut out = Vec::new();
    match stage {
        Stage::Ingest => {
            out.extend(
                cfg.paths
                    .corpus
                    .iter()
                    .map(|c| ("corpus".to_string(), c.clone())),
            );
            out.extend(
                cfg.paths
                    .ner_gazetteer
                    .iter()
                    .map(|g| ("gazetteer".to_string(), g.clone())),
            );
        }
        Stage::Curate | Stage::Ground => {
            if p.workspace.manifest().exists() {
                for row in super::read_manifest(&p.workspace.manifest())? {
                    if let Some(rel) = &row.record.image_path {
                        out.push((format!("image:{}", row.id()), resolve_image(cfg, rel)));
                    }
                }
            }
            if stage == Stage::Ground && cfg.ground.enabled {
                if let Some(kb) = &cfg.paths.kb_snapshot {
                    out.push(("kb".to_string(), kb.clone()));
                }
            }
        }
        Stage::Subjects => {
            out.extend(
                cfg.paths
                    .llm_recorded
                    .iter()
                    .map(|r| ("recorded".to_string(), r.clone())),
            );
        }
        Stage::Generate => {
            out.extend(
                cfg.generate
                    .checkpoint
                    .iter()
                    .map(|c| ("checkpoint".to_string(), c.clone())),
            );
        }
        Stage::Condition | Stage::Train | Stage::Evaluate => {}
    }
    Ok(out)
}

pub(super) fn run(p: &Pipeline, stage: Stage, rows: &mut Vec<ManifestRow>) -> Result<Value> {
    match stage {
        Stage::Ingest => ingest(p, rows),
        Stage::Curate => curate(p, rows),
        Stage::Ground => ground(p, rows),
        Stage::Subjects => subjects(p, rows),
        Stage::Condition => condition(p, rows),
        Stage::Train => train(p, rows),
        Stage::Generate => generate(p, rows),
        Stage::Evaluate => evaluate(p, rows),
    }
}

fn reset_dir(dir: &std::path::Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn read_corpus(path: &std::path::Path) -> Result<Vec<CaptionRecord>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in std::fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: CaptionRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(r.id.clone()) {
            return Err(Error::Manifest {
                line: i + 1,
                message: format!("duplicate record id {:?}", r.id),
            });
        }
        out.push(r);
    }
    Ok(out)
}

fn caption_passes(r: &CaptionRecord) -> bool {
    r.passed(RULE_MIN_WORDS) && r.passed(RULE_EXCLUDED_ENTITIES)
}

fn ingest(p: &Pipeline, rows: &mut Vec<ManifestRow>) -> Result<Value> {
    let cfg = &p.config;
    let records = read_corpus(required(&cfg.paths.corpus, "paths.corpus", Stage::Ingest)?)?;
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let ner: Box<dyn NerBackend> = match &cfg.paths.ner_gazetteer {
        Some(path) => Box::new(GazetteerNer::from_jsonl(path)?),
        None => registry::ner(&cfg.models.ner)?,
    };
    let mut tagged = Vec::with_capacity(records.len());
    for mut r in records {
        r.split = Split::Unassigned;
        r.filter_verdicts.clear();
        r.article_category_unified = None;
        if r.caption.trim().is_empty() {
            r.token_count = 0;
            r.entity_mentions.clear();
            r.set_verdict(Verdict::with_detail(RULE_MIN_WORDS, false, "empty caption"));
            tagged.push(r);
            continue;
        }
        let r = tag_entities(r, Some(ner.as_ref()))?;
        tagged.push(filter_caption(r, cfg.ingest.min_words, &cfg.ingest.excluded_types)?.0);
    }
    if !cfg.ingest.taxonomy.is_empty() {
        let model = registry::similarity(&cfg.models.similarity).ok();
        tagged = cluster_categories(
            tagged,
            &cfg.ingest.taxonomy,
            model.as_deref(),
            cfg.ingest.min_category_similarity,
        )?;
    }

    let previous: BTreeMap<String, ManifestRow> =
        rows.drain(..).map(|r| (r.record.id.clone(), r)).collect();
    *rows = tagged
        .into_iter()
        .map(|r| {
            let mut row = ManifestRow::new(r);
            if let Some(old) = previous.get(row.id()) {
                row.adopt_downstream(old, Stage::Ingest);
            }
            row
        })
        .collect();

    let all: Vec<CaptionRecord> = rows
        .iter()
        .map(|r| r.record.clone())
        .filter(|r| !r.caption.trim().is_empty())
        .collect();
    let kept: Vec<CaptionRecord> = all.iter().filter(|r| caption_passes(r)).cloned().collect();
    let stats = json!({
        "all": compute_corpus_stats(&all).ok(),
        "caption_filtered": compute_corpus_stats(&kept).ok(),
    });
    super::manifest::write_atomic(
        &p.workspace.corpus_stats(),
        serde_json::to_string_pretty(&stats)?.as_bytes(),
    )?;
    Ok(json!({
        "records": rows.len(),
        "min_words_pass": rows.iter().filter(|r| r.record.passed(RULE_MIN_WORDS)).count(),
        "caption_pass": kept.len(),
    }))
}

fn load_rgb(path: &std::path::Path) -> std::result::Result<RgbImage, String> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| format!("{}: {e}", path.display()))
}

fn curate(p: &Pipeline, rows: &mut [ManifestRow]) -> Result<Value> {
    let cfg = &p.config;
    let iqa = registry::iqa(&cfg.models.iqa)?;
    let det = registry::detector(&cfg.models.detector)?;
    let dir = p.workspace.images();
    reset_dir(&dir)?;
    for row in rows.iter_mut() {
        row.clear(Stage::Curate);
        if !row.record.passed(RULE_MIN_WORDS) {
            continue;
        }
        let Some(rel) = row.record.image_path.clone() else {
            row.record.set_verdict(Verdict::with_detail(
                RULE_IMAGE_AVAILABLE,
                false,
                "no image path",
            ));
            continue;
        };
        let img = match load_rgb(&resolve_image(cfg, &rel)) {
            Ok(img) if img.width() > 0 && img.height() > 0 => img,
            Ok(_) => {
                row.record.set_verdict(Verdict::with_detail(
                    RULE_IMAGE_AVAILABLE,
                    false,
                    "empty image",
                ));
                continue;
            }
            Err(msg) => {
                row.record
                    .set_verdict(Verdict::with_detail(RULE_IMAGE_AVAILABLE, false, msg));
                continue;
            }
        };
        let c = curate_image(
            &row.record.id,
            &rel,
            &img,
            cfg.curate.resolution,
            Some(iqa.as_ref()),
            cfg.curate.iqa_threshold,
            Some((det.as_ref(), cfg.curate.face_confidence)),
        )?;
        let name = format!("{}.png", file_stem(&row.record.id));
        c.image.save(dir.join(&name))?;
        let quality = c.record.quality_pass == Some(true);
        let faces = c.record.face_boxes.as_ref().map_or(0, Vec::len);
        row.record
            .set_verdict(Verdict::new(RULE_IMAGE_AVAILABLE, true));
        row.record.set_verdict(Verdict::with_detail(
            RULE_IMAGE_QUALITY,
            quality,
            format!(
                "score {:.4}, threshold {}",
                c.record.iqa_score.unwrap_or(f64::NAN),
                cfg.curate.iqa_threshold
            ),
        ));
        row.record.set_verdict(Verdict::with_detail(
            RULE_FACE_FREE,
            faces == 0,
            format!("{faces} face(s)"),
        ));
        row.image = Some(c.record);
        row.crop = Some(format!("images/{name}"));
    }
    for row in rows.iter_mut() {
        let r = &row.record;
        let keep = caption_passes(r) && r.passed(RULE_IMAGE_QUALITY) && r.passed(RULE_FACE_FREE);
        row.non_entity = r.passed(RULE_IMAGE_AVAILABLE).then_some(keep);
    }
    let retained: Vec<usize> = (0..rows.len())
        .filter(|&i| rows[i].in_non_entity())
        .collect();
    let assigned = assign_splits(
        retained.iter().map(|&i| rows[i].record.clone()).collect(),
        cfg.curate.split_ratios,
        cfg.curate.seed,
    )?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for (&i, r) in retained.iter().zip(assigned) {
        *counts.entry(r.split.to_string()).or_default() += 1;
        rows[i].record.split = r.split;
    }
    Ok(json!({
        "images": rows.iter().filter(|r| r.image.is_some()).count(),
        "quality_pass": rows.iter().filter(|r| r.record.passed(RULE_IMAGE_QUALITY)).count(),
        "non_entity": retained.len(),
        "splits": counts,
    }))
}

fn ground(p: &Pipeline, rows: &mut [ManifestRow]) -> Result<Value> {
    let cfg = &p.config;
    let ws = &p.workspace;
    for row in rows.iter_mut() {
        row.clear(Stage::Ground);
    }
    for dir in [ws.root.join("entities"), ws.entity_images()] {
        reset_dir(&dir)?;
    }
    if !cfg.ground.enabled {
        super::manifest::write_atomic(&ws.entity_subset(), b"{\"enabled\":false}\n")?;
        return Ok(json!({ "enabled": false }));
    }
    let kb_path = cfg
        .paths
        .kb_snapshot
        .clone()
        .unwrap_or_else(|| PathBuf::from("<paths.kb_snapshot unset>"));
    let kb = KnowledgeSnapshot::load(&kb_path)?;
    let det = registry::detector(&cfg.models.detector)?;
    let rec = registry::recognizer(&cfg.models.recognizer)?;

    let mut profiles: BTreeMap<String, (EntityProfile, RgbImage)> = BTreeMap::new();
    for e in kb.entities.iter().filter(|e| e.entity_type == "PERSON") {
        let Some(path) = kb.reference_image_path(e) else {
            continue;
        };
        let img = match load_rgb(&path) {
            Ok(img) => img,
            Err(msg) => {
                log::warn!("ground: skipping {}: {msg}", e.entity_id);
                continue;
            }
        };
        match build_profile(
            &e.entity_id,
            &e.display_name,
            &path,
            &img,
            det.as_ref(),
            rec.as_ref(),
        ) {
            Ok(profile) => {
                profiles.insert(e.entity_id.clone(), (profile, img));
            }
            Err(err @ Error::ReferenceWithoutFace(_)) => log::warn!("ground: {err}"),
            Err(err) => return Err(err),
        }
    }
    let known: BTreeSet<String> = profiles.keys().cloned().collect();
    let linker = AliasLinker::new(kb);

    let mut pairs = Vec::new();
    let mut found: BTreeMap<usize, (EntityColumn, Option<crate::imaging::FaceBox>)> =
        BTreeMap::new();
    for (i, row) in rows.iter_mut().enumerate() {
        let r = &row.record;
        let has_person = r.entity_mentions.iter().any(|m| m.label == "PERSON");
        if !(r.passed(RULE_MIN_WORDS) && r.passed(RULE_IMAGE_QUALITY) && has_person) {
            continue;
        }
        let linking = link_mentions(r, &linker)?;
        let person = |surface: &str| {
            r.entity_mentions
                .iter()
                .any(|m| m.surface == surface && m.label == "PERSON")
        };
        let Some(m) = linking
            .mentions
            .iter()
            .find(|m| person(&m.surface) && known.contains(&m.entity_id))
        else {
            row.record.set_verdict(Verdict::with_detail(
                RULE_ENTITY_VERIFIED,
                false,
                "no linkable person",
            ));
            continue;
        };
        let Some(rel) = r.image_path.as_deref() else {
            continue;
        };
        let img = load_rgb(&resolve_image(cfg, rel)).map_err(Error::InvalidArgument)?;
        let v = verify_entity_in_image(
            &img,
            &profiles[&m.entity_id].0,
            det.as_ref(),
            rec.as_ref(),
            cfg.ground.min_similarity,
        )?;
        pairs.push(VerifiedPair {
            record_id: r.id.clone(),
            entity_id: m.entity_id.clone(),
            present: v.present,
        });
        let col = EntityColumn {
            entity_id: m.entity_id.clone(),
            surface: m.surface.clone(),
            similarity: v.similarity,
            present: v.present,
            retained: false,
            crop: None,
            split: Split::Unassigned,
        };
        let detail = v
            .similarity
            .map_or("no face".to_string(), |s| format!("similarity {s:.4}"));
        row.record.set_verdict(Verdict::with_detail(
            RULE_ENTITY_VERIFIED,
            v.present,
            detail,
        ));
        found.insert(i, (col, v.best_box));
    }

    let subset = build_entity_subset(&pairs, &known, cfg.ground.min_samples);
    let kept: BTreeSet<&str> = subset.pairs.iter().map(|p| p.record_id.as_str()).collect();
    let mut retained_idx = Vec::new();
    for (&i, (col, face)) in found.iter_mut() {
        if !kept.contains(rows[i].id()) {
            continue;
        }
        let face = face.ok_or_else(|| {
            Error::InvalidArgument(format!("{}: verified without a face box", rows[i].id()))
        })?;
        let rel = rows[i].record.image_path.clone().unwrap_or_default();
        let img = load_rgb(&resolve_image(cfg, &rel)).map_err(Error::InvalidArgument)?;
        let (crop, _) = crop_around_face(&img, &face, cfg.curate.resolution)?;
        let name = format!("{}.png", file_stem(rows[i].id()));
        crop.save(ws.entity_images().join(&name))?;
        col.retained = true;
        col.crop = Some(format!("entity_images/{name}"));
        retained_idx.push(i);
    }
    let seed = crate::zoo::dense::mix_seed(cfg.curate.seed, 1);
    let assigned = assign_splits(
        retained_idx
            .iter()
            .map(|&i| rows[i].record.clone())
            .map(unassigned)
            .collect(),
        cfg.curate.split_ratios,
        seed,
    )?;
    for (&i, r) in retained_idx.iter().zip(assigned) {
        if let Some((col, _)) = found.get_mut(&i) {
            col.split = r.split;
        }
    }
    for (i, (col, _)) in found {
        rows[i].entity = Some(col);
    }

    let repo = ProfileRepository::new(&ws.root);
    for (id, (mut profile, img)) in profiles {
        profile.sample_count = subset.counts.get(&id).copied().unwrap_or(0);
        repo.save(&profile, &img)?;
    }
    let summary = json!({
        "enabled": true,
        "profiles": known.len(),
        "candidates": pairs.len(),
        "verified": pairs.iter().filter(|p| p.present).count(),
        "retained": subset.pairs.len(),
        "counts": subset.counts,
        "dropped_entities": subset.dropped_entities,
    });
    super::manifest::write_atomic(
        &ws.entity_subset(),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    Ok(summary)
}

fn unassigned(mut r: CaptionRecord) -> CaptionRecord {
    r.split = Split::Unassigned;
    r
}

fn in_generation_split(row: &ManifestRow, split: Split) -> bool {
    (row.in_non_entity() && row.record.split == split)
        || row.entity_retained().is_some_and(|e| e.split == split)
}

fn subjects(p: &Pipeline, rows: &mut [ManifestRow]) -> Result<Value> {
    let cfg = &p.config;
    let (client, retry): (Box<dyn LlmClient>, RetryPolicy) = match &cfg.paths.llm_recorded {
        Some(path) => (
            Box::new(RecordedLlmClient::load(&cfg.models.llm, path)?),
            RetryPolicy::immediate(cfg.llm.max_attempts),
        ),
        None => (
            Box::new(HttpChatClient::from_env(&cfg.llm.endpoint, &cfg.models.llm)),
            RetryPolicy {
                max_attempts: cfg.llm.max_attempts,
                ..RetryPolicy::default()
            },
        ),
    };
    let cache = ResponseCache::new(cfg.cache_dir().join("llm"));
    let extractor = SubjectExtractor {
        client: client.as_ref(),
        retry,
        cache: Some(&cache),
    };
    let template = PromptTemplate::for_family(cfg.llm.family);

    for row in rows.iter_mut() {
        row.clear(Stage::Subjects);
    }
    let idx: Vec<usize> = (0..rows.len())
        .filter(|&i| rows[i].in_non_entity() || rows[i].entity_retained().is_some())
        .collect();
    let items: Vec<(String, String)> = idx
        .iter()
        .map(|&i| (rows[i].record.id.clone(), rows[i].record.caption.clone()))
        .collect();
    let mut annotations = Vec::with_capacity(items.len());
    for (&i, result) in
        idx.iter()
            .zip(extractor.extract_batch(&items, &template, cfg.llm.parallelism))
    {
        let a = result?;
        rows[i].subjects = Some(SubjectColumn {
            main_subject: a.main_subject.clone(),
            additional_subjects: a.additional_subjects.clone(),
            fallback_used: a.fallback_used,
            llm_id: a.llm_id.clone(),
        });
        annotations.push(a);
    }
    write_sidecar(&p.workspace.subjects(), &annotations)?;

    let mut rewrites = Vec::new();
    if cfg.llm.rewrite {
        for &i in idx
            .iter()
            .filter(|&&i| in_generation_split(&rows[i], cfg.generate_split))
        {
            let r = extractor.rewrite(&rows[i].record.caption)?;
            rewrites.push(RewriteRecord {
                record_id: rows[i].record.id.clone(),
                rewrite: r.prompt,
                llm_id: cfg.models.llm.clone(),
                raw_response: r.raw_response,
            });
        }
        let mut out = String::new();
        for r in &rewrites {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        super::manifest::write_atomic(&p.workspace.rewrites(), out.as_bytes())?;
    } else if p.workspace.rewrites().exists() {
        std::fs::remove_file(p.workspace.rewrites())?;
    }
    Ok(json!({
        "annotated": annotations.len(),
        "fallback": annotations.iter().filter(|a| a.fallback_used).count(),
        "rewrites": rewrites.len(),
    }))
}

fn read_rewrites(path: &std::path::Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    for (i, line) in std::fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: RewriteRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(r.record_id, r.rewrite);
    }
    Ok(out)
}

fn condition(p: &Pipeline, rows: &mut [ManifestRow]) -> Result<Value> {
    let cfg = &p.config;
    let encoder = registry::text_encoder(&cfg.models.text_encoder)?;
    let beta = scale_exponent_to_beta(cfg.condition.scale_exp)?;
    let annotations = read_sidecar(&p.workspace.subjects())?;
    let mut entries = Vec::new();
    let mut overflow = Vec::new();
    for row in rows.iter_mut() {
        row.clear(Stage::Condition);
        if row.subjects.is_none() {
            continue;
        }
        match subject_conditioning(
            &row.record.caption,
            annotations.get(row.id()),
            &encoder,
            beta,
        ) {
            Ok((seq, w)) => {
                row.condition = Some(ConditionColumn {
                    tokens: seq.len(),
                    key_indices: w.key_indices.iter().copied().collect(),
                    beta,
                });
                entries.push((row.record.id.clone(), seq, w));
            }
            Err(e @ Error::ContextOverflow { .. }) => {
                log::warn!("condition: {}: {e}", row.id());
                overflow.push(row.record.id.clone());
            }
            Err(e) => return Err(e),
        }
    }
    reset_dir(&p.workspace.embeddings())?;
    EmbeddingCache::new(p.workspace.embeddings()).write(&entries)?;
    Ok(json!({ "encoded": entries.len(), "context_overflow": overflow, "beta": beta }))
}

fn train(p: &Pipeline, rows: &mut [ManifestRow]) -> Result<Value> {
    let cfg = &p.config;
    let encoder = registry::text_encoder(&cfg.models.text_encoder)?;
    let mut denoiser = registry::backbone(&cfg.models.backbone, encoder.width())?;
    let ae = registry::autoencoder(&cfg.models.autoencoder)?;
    let reward = registry::scorer(&cfg.models.reward)?;
    let cache = EmbeddingCache::new(p.workspace.embeddings()).load()?;
    let beta = scale_exponent_to_beta(cfg.train.scale_exp)?;

    let mut samples = Vec::new();
    for row in rows
        .iter()
        .filter(|r| r.in_non_entity() && r.record.split == Split::Train)
    {
        let (Some((entry, seq)), Some(crop)) = (cache.get(row.id()), row.crop.as_ref()) else {
            continue;
        };
        let spans: Vec<(usize, usize)> = entry.key_indices.iter().map(|&i| (i, i)).collect();
        let weights = build_weight_vector(seq.len(), &spans, beta, &[])?;
        let img = load_rgb(&p.workspace.root.join(crop)).map_err(Error::InvalidArgument)?;
        samples.push(TrainSample::new(
            row.id(),
            &row.record.caption,
            &img,
            &ae,
            DType::F32,
            seq.clone(),
            weights,
        )?);
    }
    let mut tcfg = cfg.train.clone();
    tcfg.renormalize = cfg.condition.renormalize;
    reset_dir(&p.workspace.root.join("checkpoints"))?;
    let stop = (cfg.train_max_steps > 0).then_some(cfg.train_max_steps);
    let out = run_training(
        &samples,
        &tcfg,
        &mut denoiser,
        &ae,
        &reward,
        Some(&p.workspace.checkpoint()),
        None,
        stop,
    )?;
    let summary = json!({
        "samples": samples.len(),
        "global_step": out.state.global_step,
        "skipped_nonfinite": out.state.skipped_nonfinite,
        "trainable_parameters": out.state.trainable_parameter_count(),
        "reward_history": out.state.reward_history,
        "checkpoint_hash": out.checkpoint.content_hash(),
    });
    super::manifest::write_atomic(
        &p.workspace.train_summary(),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    Ok(json!({
        "samples": samples.len(),
        "global_step": out.state.global_step,
        "checkpoint_hash": out.checkpoint.content_hash(),
    }))
}

/// Rows of one evaluation subset in the configured generation split, with
/// their reference crop.
fn subset_rows(rows: &[ManifestRow], subset: &str, split: Split) -> Vec<(usize, String)> {
    rows.iter()
        .enumerate()
        .filter_map(|(i, r)| match subset {
            SUBSET_NON_ENTITY => {
                (r.in_non_entity() && r.record.split == split && r.condition.is_some())
                    .then(|| r.crop.clone())
                    .flatten()
                    .map(|c| (i, c))
            }
            _ => r
                .entity_retained()
                .filter(|e| e.split == split && r.condition.is_some())
                .and_then(|e| e.crop.clone())
                .map(|c| (i, c)),
        })
        .collect()
}

fn generate(p: &Pipeline, rows: &mut [ManifestRow]) -> Result<Value> {
    let cfg = &p.config;
    let encoder = registry::text_encoder(&cfg.models.text_encoder)?;
    let mut denoiser = registry::backbone(&cfg.models.backbone, encoder.width())?;
    let ae = registry::autoencoder(&cfg.models.autoencoder)?;
    let checkpoint = cfg.generate.checkpoint.clone().or_else(|| {
        (p.ledger.get(Stage::Train).is_some() && p.workspace.checkpoint().exists())
            .then(|| p.workspace.checkpoint())
    });
    let checkpoint_hash = checkpoint
        .as_deref()
        .map(|c| install_checkpoint(&mut denoiser, c))
        .transpose()?;
    let backend = GenerationBackend {
        encoder: &encoder,
        denoiser: &denoiser,
        autoencoder: &ae,
        checkpoint_hash,
    };
    let annotations = read_sidecar(&p.workspace.subjects())?;
    let rewrites = read_rewrites(&p.workspace.rewrites())?;

    let mut summary = serde_json::Map::new();
    for subset in [SUBSET_NON_ENTITY, SUBSET_ENTITY] {
        let items: Vec<BatchItem> = subset_rows(rows, subset, cfg.generate_split)
            .into_iter()
            .map(|(i, _)| BatchItem {
                record_id: rows[i].record.id.clone(),
                caption: rows[i].record.caption.clone(),
                subjects: annotations.get(rows[i].id()).cloned(),
                rewrite: rewrites.get(rows[i].id()).cloned(),
            })
            .collect();
        let out_dir = p.workspace.generated(subset);
        if items.is_empty() {
            if out_dir.exists() {
                std::fs::remove_dir_all(&out_dir)?;
            }
            continue;
        }
        let outcome = batch_generate(&items, &cfg.generate, &backend, &out_dir)?;
        for (id, e) in &outcome.failures {
            log::warn!("generate: {id}: {e}");
        }
        summary.insert(
            subset.to_string(),
            json!({
                "records": items.len(),
                "generated": outcome.generated,
                "skipped": outcome.skipped,
                "failures": outcome.failures.iter().map(|(id, e)| json!({"record_id": id, "code": e.code()})).collect::<Vec<_>>(),
            }),
        );
    }
    Ok(Value::Object(summary))
}

fn evaluate(p: &Pipeline, rows: &mut [ManifestRow]) -> Result<Value> {
    let cfg = &p.config;
    let features = registry::features(&cfg.models.features)?;
    let reward = registry::scorer(&cfg.models.reward)?;
    let hps = registry::scorer(&cfg.models.preference)?;
    let det = registry::detector(&cfg.models.detector)?;
    let rec = registry::recognizer(&cfg.models.recognizer)?;
    let profiles: BTreeMap<String, EntityProfile> = ProfileRepository::new(&p.workspace.root)
        .load_all()?
        .into_iter()
        .map(|e| (e.entity_id.clone(), e))
        .collect();

    let mut tables = Vec::new();
    let mut summary = serde_json::Map::new();
    for subset in [SUBSET_NON_ENTITY, SUBSET_ENTITY] {
        let report_path = p.workspace.report(subset);
        let dir = p.workspace.generated(subset);
        let selected = subset_rows(rows, subset, cfg.generate_split);
        let provenance_rows = if dir.join(PROVENANCE_FILE).exists() {
            crate::generation::read_provenance(&dir.join(PROVENANCE_FILE))?
        } else {
            Vec::new()
        };
        if selected.is_empty() || provenance_rows.is_empty() {
            if report_path.exists() {
                std::fs::remove_file(&report_path)?;
            }
            continue;
        }
        let entity_mode = subset == SUBSET_ENTITY;
        let mut runs = Vec::new();
        for &seed in &cfg.generate.seeds {
            let mut generated = Vec::new();
            let mut references = Vec::new();
            let mut captions = Vec::new();
            let mut entity_profiles = Vec::new();
            for (i, crop) in &selected {
                let path = dir.join(image_file_name(rows[*i].id(), seed));
                let Ok(img) = load_rgb(&path) else { continue };
                let reference =
                    load_rgb(&p.workspace.root.join(crop)).map_err(Error::InvalidArgument)?;
                let reference = if reference.dimensions() == img.dimensions() {
                    reference
                } else {
                    image::imageops::resize(
                        &reference,
                        img.width(),
                        img.height(),
                        image::imageops::FilterType::Triangle,
                    )
                };
                if entity_mode {
                    let id = &rows[*i]
                        .entity
                        .as_ref()
                        .map(|e| e.entity_id.clone())
                        .unwrap_or_default();
                    let profile = profiles.get(id).ok_or_else(|| {
                        Error::InvalidArgument(format!("no profile for entity {id}"))
                    })?;
                    entity_profiles.push(profile);
                }
                generated.push(img);
                references.push(reference);
                captions.push(rows[*i].record.caption.clone());
            }
            if generated.is_empty() {
                continue;
            }
            let fid = if generated.len() >= 2 {
                Some(frechet_distance(
                    &FeatureSet::extract(&features, &generated)?,
                    &FeatureSet::extract(&features, &references)?,
                )?)
            } else {
                None
            };
            let (scored, entity) = if entity_mode {
                let views = generated
                    .iter()
                    .map(|g| face_aware_view(g, det.as_ref(), cfg.eval.face_crop))
                    .collect::<Result<Vec<_>>>()?;
                let pairs: Vec<(&RgbImage, &EntityProfile)> = generated
                    .iter()
                    .zip(entity_profiles.iter().copied())
                    .collect();
                (
                    views,
                    Some(entity_metrics(&pairs, det.as_ref(), rec.as_ref())?),
                )
            } else {
                (generated.clone(), None)
            };
            runs.push(SeedRun {
                seed,
                sample_count: generated.len(),
                fid,
                image_reward: Some(score_alignment(&scored, &captions, Some(&reward))?),
                hps: Some(score_alignment(&scored, &captions, Some(&hps))?),
                entity,
            });
        }
        let first = &provenance_rows[0];
        let provenance = BTreeMap::from([
            (
                "checkpoint".to_string(),
                first
                    .checkpoint_hash
                    .clone()
                    .unwrap_or_else(|| "none".into()),
            ),
            ("backbone".to_string(), first.backbone.clone()),
            ("sampler".to_string(), first.sampler.clone()),
            ("mode".to_string(), first.mode.to_string()),
            ("scale_exp".to_string(), first.scale_exp.to_string()),
            (
                "guidance_scale".to_string(),
                first.guidance_scale.to_string(),
            ),
            (
                "num_inference_steps".to_string(),
                first.num_inference_steps.to_string(),
            ),
            ("features".to_string(), cfg.models.features.clone()),
            ("reward".to_string(), cfg.models.reward.clone()),
            ("preference".to_string(), cfg.models.preference.clone()),
            ("detector".to_string(), cfg.models.detector.clone()),
            ("recognizer".to_string(), cfg.models.recognizer.clone()),
            ("split".to_string(), cfg.generate_split.to_string()),
        ]);
        let label = if entity_mode {
            format!("{} (entity)", cfg.eval.label)
        } else {
            cfg.eval.label.clone()
        };
        let report = build_report(&label, runs, entity_mode, provenance);
        validate_report(&report).map_err(|errs| {
            Error::InvalidArgument(format!("report invariants: {}", errs.join("; ")))
        })?;
        report.write(&report_path)?;
        tables.push(format!("## {label}\n\n{}", report.table()));
        summary.insert(
            subset.to_string(),
            json!({
                "sample_count": report.sample_count,
                "fid": report.fid,
                "image_reward": report.image_reward_mean,
                "hps": report.hps_mean,
                "detect_accuracy": report.detect_accuracy,
                "identity_preservation": report.identity_preservation,
            }),
        );
    }
    super::manifest::write_atomic(&p.workspace.report_table(), tables.join("\n").as_bytes())?;
    Ok(Value::Object(summary))
}
