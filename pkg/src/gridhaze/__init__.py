"""GridDehazeNet at desk scale."""
