use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roxmltree::{Document, Node, ParsingOptions};

use super::{DataError, PairRecord, PairedCorpus};

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub id: String,
    pub caption: String,
    pub image_ref: String,
    /// Body paragraphs that cite this figure, in document order.
    pub inline_refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Article {
    pub id: String,
    pub year: Option<u32>,
    pub abstract_text: String,
    pub figures: Vec<Figure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOptions {
    pub seed: u64,
    /// Articles published before this year (or undated) are skipped.
    pub min_year: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub article_id: String,
    pub caption_words: usize,
    pub caption_chars: usize,
    pub original_caption_words: usize,
}

impl ManifestRow {
    pub const CSV_HEADER: &'static str = "id,article_id,caption_words,caption_chars,original_caption_words";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            csv_field(&self.id),
            csv_field(&self.article_id),
            self.caption_words,
            self.caption_chars,
            self.original_caption_words
        )
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutput {
    pub corpus: PairedCorpus,
    pub manifest: Vec<ManifestRow>,
    pub skipped_no_figures: usize,
    pub skipped_by_year: usize,
    pub skipped_duplicate: usize,
}

fn normalized_text(node: Node) -> String {
    let raw: String = node
        .descendants()
        .filter(|n| n.is_text())
        .filter_map(|n| n.text())
        .collect::<Vec<_>>()
        .join("");
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn find<'a, 'i>(node: Node<'a, 'i>, tag: &str) -> Option<Node<'a, 'i>> {
    node.descendants().find(|n| n.has_tag_name(tag))
}

/// Minimal reader for JATS-style article XML: id, first publication year,
/// abstract, figures with captions, and the body paragraphs citing each
/// figure through `<xref ref-type="fig" rid="…">`.
pub fn parse_article_xml(xml: &str, fallback_id: &str) -> Result<Article, DataError> {
    let opts = ParsingOptions {
        allow_dtd: true,
        ..ParsingOptions::default()
    };
    let doc = Document::parse_with_options(xml, opts)
        .map_err(|e| DataError::Invalid(format!("article {fallback_id}: {e}")))?;
    let root = doc.root_element();
    let id = root
        .descendants()
        .filter(|n| n.has_tag_name("article-id"))
        .find(|n| matches!(n.attribute("pub-id-type"), Some("pmc") | Some("pmcid")))
        .map(normalized_text)
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| fallback_id.to_string());
    let year = root
        .descendants()
        .filter(|n| n.has_tag_name("pub-date"))
        .filter_map(|d| find(d, "year"))
        .filter_map(|y| normalized_text(y).parse::<u32>().ok())
        .min();
    let abstract_text = find(root, "abstract").map(normalized_text).unwrap_or_default();

    let mut figures = Vec::new();
    for fig in root.descendants().filter(|n| n.has_tag_name("fig")) {
        let fig_id = fig.attribute("id").unwrap_or_default().to_string();
        let caption = find(fig, "caption").map(normalized_text).unwrap_or_default();
        let image_ref = find(fig, "graphic")
            .and_then(|g| g.attributes().find(|a| a.name() == "href").map(|a| a.value().to_string()))
            .unwrap_or_default();
        figures.push(Figure {
            id: fig_id,
            caption,
            image_ref,
            inline_refs: Vec::new(),
        });
    }
    if let Some(body) = find(root, "body") {
        for p in body.descendants().filter(|n| n.has_tag_name("p")) {
            if p.ancestors().skip(1).any(|a| a.has_tag_name("fig") || a.has_tag_name("p")) {
                continue;
            }
            let cited: HashSet<&str> = p
                .descendants()
                .filter(|n| n.has_tag_name("xref") && n.attribute("ref-type") == Some("fig"))
                .filter_map(|n| n.attribute("rid"))
                .flat_map(str::split_whitespace)
                .collect();
            if cited.is_empty() {
                continue;
            }
            let text = normalized_text(p);
            for fig in figures.iter_mut().filter(|f| cited.contains(f.id.as_str())) {
                fig.inline_refs.push(text.clone());
            }
        }
    }
    figures.retain(|f| !f.caption.is_empty());
    Ok(Article {
        id,
        year,
        abstract_text,
        figures,
    })
}

/// Samples exactly one figure per usable article and pairs it with the
/// concatenation of its inline references and its caption.
///
/// The choice for an article depends only on the seed and the article id,
/// so it is stable under reordering or filtering of other articles.
pub fn build_long_caption_benchmark(articles: &[Article], opts: &BenchmarkOptions) -> Result<BenchmarkOutput, DataError> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    let mut manifest = Vec::new();
    let (mut no_figures, mut by_year, mut duplicate) = (0, 0, 0);
    for article in articles {
        if let Some(min) = opts.min_year {
            if article.year.is_none_or(|y| y < min) {
                by_year += 1;
                continue;
            }
        }
        if article.figures.is_empty() {
            no_figures += 1;
            continue;
        }
        if !seen.insert(article.id.clone()) {
            duplicate += 1;
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(crate::fnv1a(article.id.as_bytes()));
        let fig = &article.figures[rng.random_range(0..article.figures.len())];
        let caption = if fig.inline_refs.is_empty() {
            fig.caption.clone()
        } else {
            format!("{}\n\n{}", fig.inline_refs.join("\n\n"), fig.caption)
        };
        let id = format!("{}_{}", article.id, fig.id);
        manifest.push(ManifestRow {
            id: id.clone(),
            article_id: article.id.clone(),
            caption_words: caption.split_whitespace().count(),
            caption_chars: caption.chars().count(),
            original_caption_words: fig.caption.split_whitespace().count(),
        });
        let context = BTreeMap::from([
            ("article_id".to_string(), article.id.clone()),
            ("figure_id".to_string(), fig.id.clone()),
            ("image_ref".to_string(), fig.image_ref.clone()),
            ("original_caption".to_string(), fig.caption.clone()),
            ("abstract".to_string(), article.abstract_text.clone()),
        ]);
        records.push(PairRecord {
            id,
            image: Vec::new(),
            caption,
            context,
        });
    }
    Ok(BenchmarkOutput {
        corpus: PairedCorpus::new(records)?,
        manifest,
        skipped_no_figures: no_figures,
        skipped_by_year: by_year,
        skipped_duplicate: duplicate,
    })
}
