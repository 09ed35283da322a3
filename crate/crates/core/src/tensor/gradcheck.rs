use super::{Graph, ParamStore, Var};
use crate::error::Result;

/// Analytic vs central-difference comparison for one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub len: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)`.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

/// Central differences with step `h` on every scalar of every parameter.
/// `loss` must build a scalar loss from the given store; it is called
/// `1 + 2·(parameter count)` times.
pub fn gradcheck<F>(store: &ParamStore, h: f64, loss: F) -> Result<Vec<GradCheckEntry>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    const FLOOR: f64 = 1e-8;
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    let analytic = g.backward(l)?.for_params(store);
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, s)?;
        Ok(g.value(l).item())
    };
    let mut probe = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.get(id).len();
        let mut diff2 = 0.0;
        let mut num2 = 0.0;
        let mut max_abs: f64 = 0.0;
        for j in 0..n {
            let x = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = x + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = x - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[id.index()].data()[j];
            diff2 += (a - numeric) * (a - numeric);
            num2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let denom = analytic[id.index()].norm().max(num2.sqrt()).max(FLOOR);
        out.push(GradCheckEntry {
            name: store.name(id).to_string(),
            len: n,
            rel_error: diff2.sqrt() / denom,
            max_abs_error: max_abs,
        });
    }
    Ok(out)
}
