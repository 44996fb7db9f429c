//! Parameter layouts that know which axes grow with the microscale dimension.

use super::{ParamStore, Rng, Tensor};

/// One contiguous run of an axis: a fixed length or a block of size `n_eta`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Fixed(usize),
    Eta,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / (fan_in + fan_out))`.
    Xavier,
    Zeros,
    Const(f64),
    /// Explicit values for the full (fixed-shape) tensor.
    Values(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub axes: Vec<Vec<Block>>,
    pub init: Init,
}

fn axis_len(blocks: &[Block], n_eta: usize) -> usize {
    blocks.iter().map(|b| if let Block::Fixed(n) = b { *n } else { n_eta }).sum()
}

/// Position in the grown axis of each index of the old axis.
fn axis_map(blocks: &[Block], old_eta: usize, new_eta: usize) -> Vec<usize> {
    let mut map = Vec::new();
    let mut new_off = 0;
    for b in blocks {
        match *b {
            Block::Fixed(n) => {
                map.extend(new_off..new_off + n);
                new_off += n;
            }
            Block::Eta => {
                map.extend(new_off..new_off + old_eta.min(new_eta));
                new_off += new_eta;
            }
        }
    }
    map
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, axes: Vec<Vec<Block>>, init: Init) -> Self {
        Self { name: name.into(), axes, init }
    }

    /// Spec whose axes are all fixed.
    pub fn fixed(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self::new(name, shape.iter().map(|&n| vec![Block::Fixed(n)]).collect(), init)
    }

    pub fn shape(&self, n_eta: usize) -> Vec<usize> {
        self.axes.iter().map(|a| axis_len(a, n_eta)).collect()
    }

    fn fans(shape: &[usize]) -> (usize, usize) {
        match shape {
            [] => (1, 1),
            [n] => (*n, *n),
            [a, b] => (*a, *b),
            [a, b, rest @ ..] => {
                let r: usize = rest.iter().product();
                (b * r, a * r)
            }
        }
    }

    pub fn sample(&self, n_eta: usize, rng: &mut Rng) -> Tensor {
        let shape = self.shape(n_eta);
        match &self.init {
            Init::Xavier => {
                let (fi, fo) = Self::fans(&shape);
                let std = (2.0 / (fi + fo).max(1) as f64).sqrt();
                let mut t = rng.gauss_sample(&shape);
                t.data_mut().iter_mut().for_each(|v| *v *= std);
                t
            }
            Init::Zeros => Tensor::zeros(&shape),
            Init::Const(c) => Tensor::full(&shape, *c),
            Init::Values(v) => Tensor::new(&shape, v.clone()).expect("init values match the fixed shape"),
        }
    }
}

/// Fresh parameters for every spec, drawn in spec order.
pub fn init_params(specs: &[ParamSpec], n_eta: usize, rng: &mut Rng) -> ParamStore {
    let mut store = ParamStore::new();
    for s in specs {
        store.insert(s.name.clone(), s.sample(n_eta, rng));
    }
    store
}

/// Re-shapes `old` (trained at `old_eta`) for `new_eta`.
///
/// Entries that existed before keep their values; new entries and parameters
/// absent from `old` get their spec initialisation.
pub fn grow_params(old: &ParamStore, specs: &[ParamSpec], old_eta: usize, new_eta: usize, rng: &mut Rng) -> ParamStore {
    let mut store = ParamStore::new();
    for s in specs {
        let mut fresh = s.sample(new_eta, rng);
        if let Some(prev) = old.get(&s.name) {
            let old_shape = s.shape(old_eta);
            assert_eq!(prev.shape(), old_shape.as_slice(), "stored shape of {} does not match its layout", s.name);
            let maps: Vec<Vec<usize>> = s.axes.iter().map(|a| axis_map(a, old_eta, new_eta)).collect();
            let new_shape = fresh.shape().to_vec();
            let dst = fresh.data_mut();
            let mut idx = vec![0usize; old_shape.len()];
            for &v in prev.data() {
                let mut flat = 0;
                for (ax, &i) in idx.iter().enumerate() {
                    flat = flat * new_shape[ax] + maps[ax][i];
                }
                dst[flat] = v;
                for ax in (0..idx.len()).rev() {
                    idx[ax] += 1;
                    if idx[ax] < old_shape[ax] {
                        break;
                    }
                    idx[ax] = 0;
                }
            }
        }
        store.insert(s.name.clone(), fresh);
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn growth_keeps_old_entries_in_place() {
        // rows: [eta | 3 fixed], cols: [2 fixed | eta]
        let spec = ParamSpec::new("w", vec![vec![Block::Eta, Block::Fixed(3)], vec![Block::Fixed(2), Block::Eta]], Init::Xavier);
        let mut rng = Rng::new(0);
        let old = init_params(std::slice::from_ref(&spec), 1, &mut rng);
        let grown = grow_params(&old, std::slice::from_ref(&spec), 1, 2, &mut rng);
        let (o, g) = (old.get("w").unwrap(), grown.get("w").unwrap());
        assert_eq!(o.shape(), &[4, 3]);
        assert_eq!(g.shape(), &[5, 4]);
        let row_map = [0, 2, 3, 4];
        let col_map = [0, 1, 2];
        for r in 0..4 {
            for c in 0..3 {
                assert_eq!(o.data()[r * 3 + c], g.data()[row_map[r] * 4 + col_map[c]]);
            }
        }
    }

    #[test]
    fn xavier_scale() {
        let spec = ParamSpec::fixed("w", &[300, 200], Init::Xavier);
        let t = spec.sample(0, &mut Rng::new(4));
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        assert!((var / (2.0 / 500.0) - 1.0).abs() < 0.02);
    }
}
