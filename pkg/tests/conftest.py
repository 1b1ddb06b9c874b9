from hypothesis import settings

# wall-clock deadlines are meaningless on a shared single-core runner
settings.register_profile("mfn", deadline=None)
settings.load_profile("mfn")
