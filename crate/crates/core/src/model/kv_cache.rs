use crate::tensor::Real;

/// Key and value rows of one attention layer. Rows are `d` wide with heads
/// laid out contiguously; keys are stored after the rotary encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache<R> {
    d: usize,
    pub(crate) k: Vec<R>,
    pub(crate) v: Vec<R>,
}

impl<R: Real> LayerCache<R> {
    pub fn new(d: usize) -> Self {
        LayerCache {
            d,
            k: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.k.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn keys(&self) -> &[R] {
        &self.k
    }

    pub fn values(&self) -> &[R] {
        &self.v
    }

    pub fn append(&mut self, k: &[R], v: &[R]) {
        debug_assert_eq!(k.len(), v.len());
        self.k.extend_from_slice(k);
        self.v.extend_from_slice(v);
    }

    pub fn truncate(&mut self, rows: usize) {
        let rows = rows.min(self.len());
        self.k.truncate(rows * self.d);
        self.v.truncate(rows * self.d);
    }

    /// Keep rows `0..base` followed by the listed rows (in order).
    pub fn compact(&mut self, base: usize, keep: &[usize]) {
        let d = self.d;
        for (slot, &src) in keep.iter().enumerate() {
            let dst = base + slot;
            if dst != src {
                self.k.copy_within(src * d..(src + 1) * d, dst * d);
                self.v.copy_within(src * d..(src + 1) * d, dst * d);
            }
        }
        self.truncate(base + keep.len());
    }
}

/// Per-layer caches over a committed prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<R> {
    pub(crate) layers: Vec<LayerCache<R>>,
}

impl<R: Real> KvCache<R> {
    pub fn new(n_layers: usize, d: usize) -> Self {
        KvCache {
            layers: (0..n_layers).map(|_| LayerCache::new(d)).collect(),
        }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer(&self, i: usize) -> &LayerCache<R> {
        &self.layers[i]
    }

    pub fn truncate(&mut self, rows: usize) {
        for l in &mut self.layers {
            l.truncate(rows);
        }
    }

    pub fn compact(&mut self, base: usize, keep: &[usize]) {
        for l in &mut self.layers {
            l.compact(base, keep);
        }
    }
}
