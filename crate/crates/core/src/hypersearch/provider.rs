use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("`{0}` not found")]
    NotFound(String),
    #[error("provider unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebPage {
    pub url: String,
    pub text: String,
}

/// Web access used while growing the hypergraph.
pub trait SearchProvider: Send + Sync {
    /// Pages about the pictured content, best first, at most `k`.
    fn reverse_image_search(&self, image: &str, k: usize) -> Result<Vec<WebPage>, ProviderError>;
    /// Visually similar images, best first, at most `k`.
    fn visual_search(&self, image: &str, k: usize) -> Result<Vec<String>, ProviderError>;
    fn fetch_page(&self, url: &str) -> Result<WebPage, ProviderError>;
    /// Resolves an image link to a stored image reference.
    fn fetch_image(&self, url: &str) -> Result<String, ProviderError>;
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Deterministic stand-in web where every URL is new. Each page opens with a
/// 24-word fact sentence ending in a year, followed by `link:` and `image:`
/// lines pointing at further unique URLs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticWeb {
    /// Links of each kind written into every page.
    pub links_per_page: usize,
    /// Caps results of visual search, to simulate underfilled providers.
    pub visual_cap: Option<usize>,
    pub reverse_cap: Option<usize>,
    /// URLs or images whose requests fail.
    pub failing: BTreeSet<String>,
}

impl Default for SyntheticWeb {
    fn default() -> Self {
        Self {
            links_per_page: 3,
            visual_cap: None,
            reverse_cap: None,
            failing: BTreeSet::new(),
        }
    }
}

impl SyntheticWeb {
    pub fn new(links_per_page: usize) -> Self {
        Self {
            links_per_page,
            ..Self::default()
        }
    }

    fn check(&self, key: &str) -> Result<(), ProviderError> {
        if self.failing.contains(key) {
            return Err(ProviderError::Unavailable(key.to_string()));
        }
        Ok(())
    }

    pub fn page_text(&self, url: &str) -> String {
        let slug: String = url
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
            .collect();
        let year = 1850 + fnv(url) % 170;
        let mut text = format!(
            "The archive entry for {slug} states that the landmark shown in the photograph \
             was finally opened to visitors after a long restoration in {year}.\n"
        );
        for m in 0..self.links_per_page {
            text.push_str(&format!("link: {url}/l{m}\n"));
        }
        for m in 0..self.links_per_page {
            text.push_str(&format!("image: {url}/p{m}.jpg\n"));
        }
        text
    }
}

impl SearchProvider for SyntheticWeb {
    fn reverse_image_search(&self, image: &str, k: usize) -> Result<Vec<WebPage>, ProviderError> {
        self.check(image)?;
        let n = self.reverse_cap.map_or(k, |c| c.min(k));
        (0..n)
            .map(|j| self.fetch_page(&format!("web://{image}/r{j}")))
            .collect()
    }

    fn visual_search(&self, image: &str, k: usize) -> Result<Vec<String>, ProviderError> {
        self.check(image)?;
        let n = self.visual_cap.map_or(k, |c| c.min(k));
        Ok((0..n).map(|j| format!("{image}~v{j}")).collect())
    }

    fn fetch_page(&self, url: &str) -> Result<WebPage, ProviderError> {
        self.check(url)?;
        Ok(WebPage {
            url: url.to_string(),
            text: self.page_text(url),
        })
    }

    fn fetch_image(&self, url: &str) -> Result<String, ProviderError> {
        self.check(url)?;
        Ok(url.to_string())
    }
}

/// Hand-written web for fixtures: explicit pages, reverse-search results and
/// visual neighbours. Unknown URLs are `NotFound`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureWeb {
    pub pages: BTreeMap<String, String>,
    #[serde(default)]
    pub reverse: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub visual: BTreeMap<String, Vec<String>>,
}

impl SearchProvider for FixtureWeb {
    fn reverse_image_search(&self, image: &str, k: usize) -> Result<Vec<WebPage>, ProviderError> {
        self.reverse
            .get(image)
            .map(|urls| urls.iter().take(k).map(|u| self.fetch_page(u)).collect())
            .unwrap_or_else(|| Ok(Vec::new()))
    }

    fn visual_search(&self, image: &str, k: usize) -> Result<Vec<String>, ProviderError> {
        Ok(self
            .visual
            .get(image)
            .map(|v| v.iter().take(k).cloned().collect())
            .unwrap_or_default())
    }

    fn fetch_page(&self, url: &str) -> Result<WebPage, ProviderError> {
        self.pages
            .get(url)
            .map(|text| WebPage {
                url: url.to_string(),
                text: text.clone(),
            })
            .ok_or_else(|| ProviderError::NotFound(url.to_string()))
    }

    fn fetch_image(&self, url: &str) -> Result<String, ProviderError> {
        Ok(url.to_string())
    }
}
