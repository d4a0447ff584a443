//! U-Net building blocks with hand-written backward passes.

mod checkpoint;
mod layers;
mod unet;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use layers::{
    batchnorm, concat_skip, conv2d, conv2d_backward, maxpool2, maxpool2_backward, relu, relu_backward, split_skip,
    transposed_conv2, transposed_conv2_backward, BatchNorm2d, Buffer, Conv2d, ConvBnRelu, ConvTranspose2, Mode, Param,
    PoolIndices, BN_EPS, BN_MOMENTUM,
};
pub use unet::{build_unet, count_parameters, count_parameters_for, DoubleConv, UNet, UNetConfig};
