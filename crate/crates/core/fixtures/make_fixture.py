import csv, json, random
random.seed(4)
# (patient, study, series, slice, [codes], split)
S = []
def add(p, st, se, sl, codes, split): S.append((p, st, se, sl, codes, split))
# official training split: untagged boxes
add(101,1,1,50,[-1],1); add(101,1,1,60,[-1,-1],1)
add(102,1,1,30,[-1],1); add(102,2,1,40,[-1],1)
add(103,1,2,70,[-1],1); add(104,1,1,80,[-1,-1],1)
# validation split
add(201,1,1,12,[1],2); add(201,1,1,18,[5],2)
add(202,1,1,33,[4,4],2); add(202,2,3,41,[3],2)
add(203,1,1,55,[6],2); add(203,1,1,57,[8],2)
add(204,1,2,20,[7],2)
add(205,1,1,64,[2,6],2); add(205,1,1,66,[5],2)
add(206,1,1,90,[3],2)
# test split
add(301,1,1,25,[1],3); add(301,1,1,27,[2],3)
add(302,1,1,44,[5,5,3],3)
add(303,1,1,10,[4],3); add(303,2,1,15,[8],3)
add(304,1,1,71,[7],3); add(305,1,1,38,[2],3)
add(306,1,1,52,[6],3); add(306,1,2,54,[1],3)
add(307,1,1,83,[5],3)
rows = []
def box():
    x = round(random.uniform(20, 400), 2); y = round(random.uniform(20, 400), 2)
    return [x, y, round(x + random.uniform(8, 80), 2), round(y + random.uniform(8, 80), 2)]
for (p, st, se, sl, codes, split) in S:
    fn = f"{p:06d}_{st:02d}_{se:02d}_{sl:03d}.png"
    for c in codes:
        b = box()
        rows.append(dict(File_name=fn, Patient_index=p, Study_index=st, Series_ID=se, Key_slice_index=sl,
            Measurement_coordinates=", ".join(str(v) for v in [b[0]+2, b[1]+3, b[2]-2, b[3]-3]),
            Bounding_boxes=", ".join(f"{v}" for v in b), Lesion_diameters_Pixel_=f"{round(b[2]-b[0],1)}, {round(b[3]-b[1],1)}",
            Coarse_lesion_type=c, Possibly_noisy=0, Train_Val_Test=split))
cols = list(rows[0].keys())
with open('crates/core/fixtures/DL_info_mini.csv', 'w', newline='') as f:
    w = csv.DictWriter(f, cols); w.writeheader(); w.writerows(rows)
listed = ["000301_01_01_025.png", "000301_01_01_027.png", "000302_01_01_044.png", "000303_01_01_010.png",
          "000201_01_01_012.png", "000999_01_01_001.png"]
with open('crates/core/fixtures/test_slices.txt', 'w') as f:
    f.write("# fully annotated test slices; entries outside the official test split are ignored\n")
    for l in listed: f.write(l + "\n")
names = ["bone","abdomen","mediastinum","liver","lung","kidney","soft_tissue","pelvis"]
per_class = {n: 0 for n in names}; untagged = 0
for (_,_,_,_,codes,_) in S:
    for c in codes:
        if c == -1: untagged += 1
        else: per_class[names[c-1]] += 1
ft = {(301,1,1,25),(301,1,1,27),(302,1,1,44),(303,1,1,10)}
exp = dict(rows=len(rows), records=len(S),
    patients=len({s[0] for s in S}), studies=len({s[:2] for s in S}), series=len({s[:3] for s in S}),
    lesions=len(rows), untagged=untagged, per_class=per_class,
    multi_lesion_slices=sum(1 for s in S if len(s[4]) > 1),
    multi_class_slices=sum(1 for s in S if len({c for c in s[4]}) > 1 and -1 not in s[4]),
    by_split={n: sum(1 for s in S if s[5]==k) for n,k in [("train",1),("val",2),("test",3)]},
    f_t=dict(slices=len(ft), patients=3, lesions=sum(len(s[4]) for s in S if s[:4] in ft)),
    pool_patients=sorted({s[0] for s in S if s[5] in (2,3) and s[0] not in (301,302,303)}),
    o_tr=dict(patients=len({s[0] for s in S if s[5]==1}), slices=sum(1 for s in S if s[5]==1), lesions=sum(len(s[4]) for s in S if s[5]==1)))
json.dump(exp, open('crates/core/fixtures/DL_info_mini.expected.json','w'), indent=2)
print(json.dumps(exp))
