//! Residual convolutional body with a three-level top-down feature pyramid.

use ctxdet_tensor::nn::ConvBlock;
use ctxdet_tensor::{Graph, ParamStore, Scalar, Var};

use super::LayerRng;
use crate::config::ModelConfig;

#[derive(Clone, Debug)]
struct Residual {
    reduce: ConvBlock,
    expand: ConvBlock,
}

impl Residual {
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let y = self.reduce.forward(g, x);
        let y = self.expand.forward(g, y);
        g.add(x, y)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: ConvBlock,
    blocks: Vec<Residual>,
}

impl Stage {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &LayerRng,
        name: &str,
        cin: usize,
        cout: usize,
        depth: usize,
    ) -> Self {
        let down_name = format!("{name}.down");
        let down = ConvBlock::new(store, &mut rng.for_layer(&down_name), &down_name, cin, cout, 3, 2);
        let hidden = (cout / 2).max(1);
        let blocks = (0..depth)
            .map(|i| {
                let r = format!("{name}.res{i}.reduce");
                let e = format!("{name}.res{i}.expand");
                Residual {
                    reduce: ConvBlock::new(store, &mut rng.for_layer(&r), &r, cout, hidden, 1, 1),
                    expand: ConvBlock::new(store, &mut rng.for_layer(&e), &e, hidden, cout, 3, 1),
                }
            })
            .collect();
        Stage { down, blocks }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let mut y = self.down.forward(g, x);
        for b in &self.blocks {
            y = b.forward(g, y);
        }
        y
    }
}

/// Bottom-up pathway at strides 2..32 and a top-down pathway that fuses deeper
/// levels into shallower ones by nearest 2x upsampling, 1x1 lateral
/// convolutions and element-wise addition.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: ConvBlock,
    stages: Vec<Stage>,
    lateral: Vec<ConvBlock>,
    reduce5: ConvBlock,
    reduce4: ConvBlock,
    smooth4: ConvBlock,
    smooth3: ConvBlock,
}

/// P3/P4/P5 graph handles.
#[derive(Clone, Copy, Debug)]
pub struct PyramidVars {
    pub p3: Var,
    pub p4: Var,
    pub p5: Var,
}

impl PyramidVars {
    pub fn levels(&self) -> [Var; 3] {
        [self.p3, self.p4, self.p5]
    }
}

impl Backbone {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &LayerRng, config: &ModelConfig) -> Self {
        let [c3, c4, c5] = config.pyramid_widths();
        let c1 = config.scaled(64);
        let c2 = config.scaled(128);
        let depth = config.stage_depth();
        let block = |store: &mut ParamStore<T>, name: &str, cin, cout, k| {
            let name = format!("backbone.{name}");
            ConvBlock::new(store, &mut rng.for_layer(&name), &name, cin, cout, k, 1)
        };
        let stem_name = "backbone.stem";
        let stem = ConvBlock::new(
            store,
            &mut rng.for_layer(stem_name),
            stem_name,
            config.input_channels,
            c1,
            3,
            2,
        );
        let widths = [c1, c2, c3, c4, c5];
        let stages = (0..4)
            .map(|i| {
                Stage::new(
                    store,
                    rng,
                    &format!("backbone.stage{}", i + 2),
                    widths[i],
                    widths[i + 1],
                    depth,
                )
            })
            .collect();
        let lateral = vec![
            block(store, "lateral3", c3, c3, 1),
            block(store, "lateral4", c4, c4, 1),
            block(store, "lateral5", c5, c5, 1),
        ];
        Backbone {
            stem,
            stages,
            lateral,
            reduce5: block(store, "reduce5", c5, c4, 1),
            reduce4: block(store, "reduce4", c4, c3, 1),
            smooth4: block(store, "smooth4", c4, c4, 3),
            smooth3: block(store, "smooth3", c3, c3, 3),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, images: Var) -> PyramidVars {
        let x = self.stem.forward(g, images);
        let s2 = self.stages[0].forward(g, x);
        let c3 = self.stages[1].forward(g, s2);
        let c4 = self.stages[2].forward(g, c3);
        let c5 = self.stages[3].forward(g, c4);

        let p5 = self.lateral[2].forward(g, c5);

        let top = self.reduce5.forward(g, p5);
        let top = g.upsample_nearest2x(top);
        let lat = self.lateral[1].forward(g, c4);
        let t4 = g.add(lat, top);
        let p4 = self.smooth4.forward(g, t4);

        let top = self.reduce4.forward(g, p4);
        let top = g.upsample_nearest2x(top);
        let lat = self.lateral[0].forward(g, c3);
        let t3 = g.add(lat, top);
        let p3 = self.smooth3.forward(g, t3);

        PyramidVars { p3, p4, p5 }
    }
}
