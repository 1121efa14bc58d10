//! Chains two color-to-color tokens on a small random field and shows that toggling
//! and disabling layers behaves like adding and removing the edits.

use triplane_edit::field::{edit_layout, Mlp};
use triplane_edit::render::{render_view, Camera, RenderOptions};
use triplane_edit::stack::COLOR_TOKEN_HIDDEN;
use triplane_edit::{EditKind, EditStack, EditToken, FieldConfig, RigidTransform, SelectionMask, TriPlaneField, Vec3};

/// A color token whose output layer only has a bias: a constant shift of `offset`.
fn shift(id: u64, offset: [f32; 3], sem_dim: usize) -> triplane_edit::Result<EditToken> {
    let (dims, acts) = edit_layout(3, COLOR_TOKEN_HIDDEN);
    let mut mlp = Mlp::zeros(&dims, &acts)?;
    let (_, bias) = mlp.layer_ranges(mlp.num_layers() - 1);
    mlp.params_mut()[bias].copy_from_slice(&offset);
    EditToken::new(
        id,
        EditKind::Color,
        mlp,
        SelectionMask::new(vec![0.0; sem_dim], f32::MAX, 0)?,
        format!("shift {id}"),
    )
}

fn mean_rgb(rgb: &[f32]) -> [f64; 3] {
    let n = (rgb.len() / 3) as f64;
    let mut m = [0.0; 3];
    for px in rgb.chunks(3) {
        for c in 0..3 {
            m[c] += px[c] as f64 / n;
        }
    }
    m
}

fn main() -> triplane_edit::Result<()> {
    let config = FieldConfig {
        resolution: 16,
        feature_dim: 8,
        hidden_width: 16,
        geom_dim: 8,
        sem_dim: 8,
        plane_init: 0.5,
        ..FieldConfig::default()
    };
    let field = TriPlaneField::new(&config)?;
    let camera = Camera::with_fov(
        32,
        32,
        50.0,
        RigidTransform::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)),
        1.0,
        5.0,
    );
    let mut stack = EditStack::new();
    stack.push(shift(1, [0.2, 0.0, 0.0], config.sem_dim)?);
    stack.push(shift(2, [0.0, 0.0, 0.1], config.sem_dim)?);

    let render = |s: Option<&EditStack>| -> triplane_edit::Result<Vec<f32>> {
        Ok(render_view(
            &camera,
            &field,
            &RenderOptions {
                samples: 32,
                stack: s,
                ..RenderOptions::default()
            },
        )?
        .rgb)
    };
    let base = render(None)?;
    println!("no layers        mean rgb {:.3?}", mean_rgb(&base));
    println!("both layers      mean rgb {:.3?}", mean_rgb(&render(Some(&stack))?));
    stack.toggle(1)?;
    println!("layer 1 off      mean rgb {:.3?}", mean_rgb(&render(Some(&stack))?));
    stack.toggle(2)?;
    let off = render(Some(&stack))?;
    println!("all layers off   identical to no layers: {}", off == base);
    for t in &stack.tokens {
        println!("token {} ({}) {} bytes", t.id, t.label, t.to_bytes()?.len());
    }
    Ok(())
}
