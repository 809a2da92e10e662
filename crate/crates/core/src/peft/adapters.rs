use crate::model::{Bindings, ModelError, Result};
use crate::tensor::{Tape, Var};

/// Two-layer gelu MLP `up(gelu(down(x)))` bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub down_w: Var,
    pub down_b: Var,
    pub up_w: Var,
    pub up_b: Var,
}

impl Mlp {
    /// Looks up `<prefix>.{down,up}.{weight,bias}`. Returns `None` when none
    /// of them is bound and an error when only some are.
    pub fn bind(b: &Bindings, prefix: &str) -> Result<Option<Self>> {
        let names = ["down.weight", "down.bias", "up.weight", "up.bias"].map(|s| format!("{prefix}.{s}"));
        let vars = names.each_ref().map(|n| b.opt(n));
        match vars {
            [Some(down_w), Some(down_b), Some(up_w), Some(up_b)] => Ok(Some(Self {
                down_w,
                down_b,
                up_w,
                up_b,
            })),
            [None, None, None, None] => Ok(None),
            _ => {
                let missing = names
                    .iter()
                    .zip(vars)
                    .find(|(_, v)| v.is_none())
                    .map(|(n, _)| n.clone())
                    .unwrap_or_default();
                Err(ModelError::MissingParam(missing))
            }
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.down_w)?;
        let h = tape.add_row(h, self.down_b)?;
        let h = tape.gelu(h)?;
        let y = tape.matmul(h, self.up_w)?;
        Ok(tape.add_row(y, self.up_b)?)
    }
}

/// Residual bottleneck: `x + up(gelu(down(x)))`.
pub fn bottleneck_forward(tape: &mut Tape, x: Var, mlp: &Mlp) -> Result<Var> {
    let r = mlp.apply(tape, x)?;
    Ok(tape.add(x, r)?)
}

/// The two coupling networks of the invertible embedding adapter.
#[derive(Debug, Clone, Copy)]
pub struct Coupling {
    pub f: Mlp,
    pub g: Mlp,
}

impl Coupling {
    pub fn bind(b: &Bindings) -> Result<Option<Self>> {
        let f = Mlp::bind(b, "adapter.invertible.f")?;
        let g = Mlp::bind(b, "adapter.invertible.g")?;
        match (f, g) {
            (Some(f), Some(g)) => Ok(Some(Self { f, g })),
            (None, None) => Ok(None),
            (None, _) => Err(ModelError::MissingParam("adapter.invertible.f".into())),
            (_, None) => Err(ModelError::MissingParam("adapter.invertible.g".into())),
        }
    }
}

fn halves(tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
    let d = tape.value(x).cols();
    if d % 2 != 0 {
        return Err(ModelError::Spec(format!("invertible adapter needs an even width, got {d}")));
    }
    let a = tape.slice_cols(x, 0, d / 2)?;
    let b = tape.slice_cols(x, d / 2, d / 2)?;
    Ok((a, b))
}

/// Additive coupling: `y1 = e1 + F(e2)`, `y2 = e2 + G(y1)`.
pub fn coupling_forward(tape: &mut Tape, e: Var, c: &Coupling) -> Result<Var> {
    let (e1, e2) = halves(tape, e)?;
    let fe2 = c.f.apply(tape, e2)?;
    let y1 = tape.add(e1, fe2)?;
    let gy1 = c.g.apply(tape, y1)?;
    let y2 = tape.add(e2, gy1)?;
    Ok(tape.concat_last_dim(&[y1, y2])?)
}

/// Exact inverse of [`coupling_forward`]: `e2 = y2 - G(y1)`, `e1 = y1 - F(e2)`.
pub fn coupling_inverse(tape: &mut Tape, y: Var, c: &Coupling) -> Result<Var> {
    let (y1, y2) = halves(tape, y)?;
    let gy1 = c.g.apply(tape, y1)?;
    let e2 = tape.sub(y2, gy1)?;
    let fe2 = c.f.apply(tape, e2)?;
    let e1 = tape.sub(y1, fe2)?;
    Ok(tape.concat_last_dim(&[e1, e2])?)
}
