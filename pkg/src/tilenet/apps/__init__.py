"""Application tiles: echo, scheduler, Reed-Solomon encoder and VR witness."""
