"""Dense reverse-mode autodiff, the toy stride-4 network and its training loop."""
